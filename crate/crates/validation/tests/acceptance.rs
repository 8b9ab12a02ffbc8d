//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. The training criteria take tens of minutes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use gbnn::curvature::{first_term_ordering, grid};
use gbnn::datasets::{
    batch_iter, cifar10_from_bytes, encode_cifar_record, encode_idx_images, encode_idx_labels, parse_idx_images,
    parse_idx_labels, IdxImages, Split,
};
use gbnn::heads::{encode_batch, head_delta, HeadKind, HeadSpec};
use gbnn::layers::Mode;
use gbnn::runner::{
    build_network, check_gradients, compare_heads_on, load_data, median, train_run, Comparison, DataSource, RunConfig,
    TrialSummary,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> RunConfig {
    RunConfig::load(workspace().join("configs").join(name)).expect("bundled config")
}

/// Real CIFAR-10 if it is available, else the synthetic image task.
fn cnn_config() -> (RunConfig, bool) {
    let dir = std::env::var_os("GBNN_CIFAR_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("data/cifar-10-batches-bin"));
    if dir.join("test_batch.bin").exists() {
        let mut cfg = config("cifar_cnn.json");
        cfg.dataset.source = DataSource::Cifar10 { path: dir };
        (cfg, true)
    } else {
        (config("synth_cnn.json"), false)
    }
}

fn fmt_curve(v: &[f64]) -> String {
    v.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>().join(" ")
}

fn gradient_suite() -> Outcome {
    let report = check_gradients(0);
    let heads = [
        "head softmax_ce",
        "head linear_mse",
        "head sigmoid_mse",
        "head tanh_mse",
    ];
    let head_max = heads
        .iter()
        .map(|c| report.entry(c).unwrap().max_rel_err)
        .fold(0.0, f64::max);
    let layers: Vec<_> = report.entries.iter().filter(|e| e.threshold == 1e-5).collect();
    let layer_max = layers.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    let ok = heads
        .iter()
        .all(|c| report.entry(c).is_some_and(|e| e.passed() && e.samples == 2000))
        && head_max < 1e-6
        && layer_max < 1e-5
        && layers.iter().all(|e| e.passed());
    outcome(
        ok,
        format!(
            "heads max rel err {head_max:.2e} (< 1e-6), {} layer checks max {layer_max:.2e} (< 1e-5)",
            layers.len()
        ),
    )
}

fn potential_identities() -> Outcome {
    let report = check_gradients(1);
    let exp = HeadSpec::exp_gb(0.1, 16.0, 0.0);
    let pow3 = HeadSpec::pow3_gb(0.001, 0.4, 10.0, 0.0);
    // Closed form: the delta is exactly the potential's derivative.
    let mut exact = true;
    for i in 0..=200 {
        let x = -8.0 + 0.08 * i as f64;
        for t in [0.0, 10.0, 16.0] {
            let one = |spec: &HeadSpec| {
                head_delta(&gbnn::Tensor::vector(vec![x]), &gbnn::Tensor::vector(vec![t]), spec)
                    .unwrap()
                    .data()[0]
            };
            exact &= one(&exp) == 0.1 * x.exp() - t;
            exact &= one(&pow3) == 0.001 * x * x * x + 0.4 - t;
        }
    }
    let e = report.entry("potential exp_gb").unwrap();
    let p = report.entry("potential pow3_gb").unwrap();
    outcome(
        exact && e.passed() && p.passed(),
        format!(
            "closed form exact: {exact}; numeric max rel err exp {:.2e}, pow3 {:.2e} (< 1e-6)",
            e.max_rel_err, p.max_rel_err
        ),
    )
}

fn hessians() -> Outcome {
    let report = check_gradients(2);
    let names = [
        "hessian linear",
        "hessian softmax",
        "hessian exp",
        "hessian pow3",
        "second derivative exp_gb",
    ];
    let entries: Vec<_> = names.iter().map(|n| report.entry(n).unwrap()).collect();
    let ok = entries.iter().all(|e| e.passed()) && entries[..4].iter().all(|e| e.samples == 100);
    let detail = entries
        .iter()
        .map(|e| format!("{} {:.2e}", e.component, e.max_rel_err))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(ok, detail)
}

fn ordering_window() -> Outcome {
    let inside = first_term_ordering(&grid(2.4, 3.2, 0.1).unwrap(), 10.0).unwrap();
    let outside = first_term_ordering(&[1.0, 5.0], 10.0).unwrap();
    let ok =
        inside.points.len() == 9 && inside.points.iter().all(|p| p.holds) && outside.points.iter().all(|p| !p.holds);
    let wide = first_term_ordering(&grid(-2.0, 6.0, 0.01).unwrap(), 10.0).unwrap();
    let window = wide
        .longest_window
        .map_or("none".into(), |(a, b)| format!("[{a:.2}, {b:.2}]"));
    outcome(
        ok,
        format!("holds on all 9 points of [2.4, 3.2], fails at 1 and 5; widest window at 0.01 steps {window}"),
    )
}

fn boundedness(cfg: &RunConfig, data: &gbnn::runner::DataSplits) -> Outcome {
    let seed = cfg.run.seed;
    let mut net = build_network(cfg, &data.sample_shape(), data.num_classes(), seed).unwrap();
    let first = batch_iter(data.train.len(), cfg.optim.batch_size, seed, 1, true)
        .unwrap()
        .remove(0);
    let (x, labels) = data.train.gather(&first);
    let logits = net.forward(&x, Mode::Train).unwrap();
    let delta = |spec: &HeadSpec| {
        let t = encode_batch(&labels, data.num_classes(), spec).unwrap();
        head_delta(&logits, &t, spec).unwrap()
    };
    let soft = delta(&HeadSpec::softmax_ce());
    let exp = delta(&HeadSpec::exp_gb(0.1, 16.0, 0.0));
    let (smin, smax) = soft
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let emin = exp.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let below = exp.data().iter().filter(|&&v| v < -6.0).count();
    outcome(
        smin >= -1.0 && smax <= 1.0 && below > 0,
        format!(
            "softmax deltas in [{smin:.3}, {smax:.3}]; exp-GB min {emin:.3}, {below} of {} below -6",
            exp.len()
        ),
    )
}

fn mnist_trend() -> Outcome {
    let cfg = config("mnist_mlp.json");
    let data = match load_data(&cfg.dataset) {
        Ok(d) => d,
        Err(e) => return outcome(false, format!("MNIST data unavailable: {e}")),
    };
    let heads = [cfg.head_for(HeadKind::LinearMse), cfg.head_for(HeadKind::SigmoidMse)];
    let cmp = compare_heads_on(&cfg, &heads, &data).unwrap();
    let (lin, sig) = (&cmp.rows[0], &cmp.rows[1]);
    let ratio = lin.median_convergence_epoch / sig.median_convergence_epoch;
    let gap = (lin.median_min_error - sig.median_min_error).abs();
    let epochs = |s: &TrialSummary| {
        s.trials
            .iter()
            .map(|t| t.convergence_epoch.map_or(0, |e| e))
            .collect::<Vec<_>>()
    };
    outcome(
        ratio <= 0.85 && gap <= 0.005,
        format!(
            "convergence epochs linear {:?} (lr {}) vs sigmoid {:?} (lr {}), ratio {ratio:.3} (<= 0.85); \
             median min error linear {:.4} sigmoid {:.4}, gap {:.2} pp (<= 0.5); median last-epoch error {:.4} / {:.4}",
            epochs(lin),
            lin.lr,
            epochs(sig),
            sig.lr,
            lin.median_min_error,
            sig.median_min_error,
            100.0 * gap,
            lin.median_final_error,
            sig.median_final_error
        ),
    )
}

fn gb_trend(cmp: &Comparison) -> Outcome {
    let curve = |i: usize| &cmp.rows[i].median_test_curve;
    let beats = |i: usize| (2..=5).filter(|&e| curve(i)[e - 1] < curve(0)[e - 1]).count();
    let (exp, pow3) = (beats(1), beats(2));
    outcome(
        exp == 4 && pow3 >= 2,
        format!(
            "median test error by epoch: softmax [{}] exp-GB [{}] pow3-GB [{}]; exp-GB below softmax at {exp}/4 of epochs 2-5, pow3-GB at {pow3}/4",
            fmt_curve(curve(0)),
            fmt_curve(curve(1)),
            fmt_curve(curve(2))
        ),
    )
}

/// Per-epoch median (over completed trials) of a layer's RMS delta.
fn median_rms(s: &TrialSummary, layer: usize, epochs: usize) -> Vec<f64> {
    (1..=epochs)
        .map(|epoch| {
            let vals: Vec<f64> = s
                .completed()
                .filter_map(|t| t.record.rms_trace(layer).iter().find(|p| p.0 == epoch).map(|p| p.1))
                .collect();
            median(&vals).unwrap_or(f64::NAN)
        })
        .collect()
}

fn rms_amplification(cfg: &RunConfig, cmp: &Comparison) -> Outcome {
    let kinds: Vec<String> = cmp.rows[0].trials[0]
        .record
        .rms
        .iter()
        .filter(|r| r.epoch == 1)
        .map(|r| r.layer_kind.clone())
        .collect();
    let hidden: Vec<usize> = kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| k.as_str() == "conv2d" || k.as_str() == "dense")
        .map(|(i, _)| i)
        .skip(1)
        .collect();
    let epochs = cfg.optim.epochs;
    let mut amplified = 0;
    let mut lines = Vec::new();
    for &l in &hidden {
        let soft = median_rms(&cmp.rows[0], l, epochs);
        let exp = median_rms(&cmp.rows[1], l, epochs);
        let ratios: Vec<f64> = exp.iter().zip(&soft).map(|(e, s)| e / s).collect();
        if ratios.iter().all(|&r| r > 1.0) {
            amplified += 1;
        }
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lines.push(format!("layer {l} ({}) ratio {lo:.2}..{hi:.2}", kinds[l]));
    }
    outcome(
        !hidden.is_empty() && 2 * amplified >= hidden.len(),
        format!(
            "exp-GB/softmax RMS delta > 1 at every epoch for {amplified}/{} hidden layers; {}",
            hidden.len(),
            lines.join("; ")
        ),
    )
}

fn normalization_term(cmp: &Comparison, classes: usize) -> Outcome {
    let mut ok = true;
    let mut checked = 0;
    let mut notes = Vec::new();
    for t in cmp.rows[0].completed() {
        let terms = &t.record.norm_terms;
        for n in terms {
            if n.max_logit.is_some_and(|m| m >= 0.0) {
                checked += 1;
                ok &= n.s > 1.0;
            }
        }
        let s0 = terms.first().map_or(f64::NAN, |n| n.s);
        ok &= s0 >= classes as f64 / 2.0 && s0 <= 10.0 * classes as f64;
        let peak = terms.iter().map(|n| n.s).fold(f64::NEG_INFINITY, f64::max);
        let last = terms.last().map_or(f64::NAN, |n| n.s);
        let monotone = terms.windows(2).all(|w| w[1].s >= w[0].s);
        notes.push(format!(
            "trial {}: s0 {s0:.2}, last {last:.3e}, peak {peak:.3e}, monotone {monotone}",
            t.trial
        ));
    }
    outcome(
        ok && checked > 0,
        format!(
            "s > 1 at {checked} steps with max logit >= 0; init s within [{}, {}]; {}",
            classes / 2,
            10 * classes,
            notes.join("; ")
        ),
    )
}

fn determinism() -> Outcome {
    let mut cfg = config("synth_cnn.json");
    if let DataSource::SynthImages { spec, test_per_class } = &mut cfg.dataset.source {
        spec.per_class = 30;
        *test_per_class = 10;
    }
    cfg.optim.epochs = 2;
    cfg.optim.batch_size = 50;
    cfg.head = HeadSpec::exp_gb(0.1, 16.0, 0.0);
    cfg.optim.lr = cfg.lr_for(HeadKind::ExpGb);
    let data = load_data(&cfg.dataset).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        train_run(&cfg, &data, 11).unwrap().record.emit_csv(d.path()).unwrap();
    }
    let mut same = Vec::new();
    for f in ["errors.csv", "rms.csv", "normterm.csv"] {
        let a = fs::read(dirs[0].path().join(f)).unwrap();
        let b = fs::read(dirs[1].path().join(f)).unwrap();
        same.push((f, a == b && !a.is_empty()));
    }
    outcome(same.iter().all(|s| s.1), format!("{same:?} (two CNN runs, same seed)"))
}

fn parsers() -> Outcome {
    let images = IdxImages {
        count: 2,
        rows: 3,
        cols: 4,
        pixels: (0..24u8).map(|i| i.wrapping_mul(29)).collect(),
    };
    let img = encode_idx_images(&images);
    let lbl = encode_idx_labels(&[4, 9]);
    let round_trip = parse_idx_images(&img).ok() == Some(images.clone())
        && encode_idx_images(&parse_idx_images(&img).unwrap()) == img
        && encode_idx_labels(&parse_idx_labels(&lbl).unwrap()) == lbl;
    let mut rejected = 0;
    let mut tried = 0;
    for (bytes, header, labels) in [(&img, 16, false), (&lbl, 8, true)] {
        for i in 0..header {
            for v in (0..=255u8).filter(|&v| v != bytes[i]) {
                let mut bad = bytes.clone();
                bad[i] = v;
                tried += 1;
                let err = if labels {
                    parse_idx_labels(&bad).is_err()
                } else {
                    parse_idx_images(&bad).is_err()
                };
                rejected += err as usize;
            }
        }
    }
    let mut cifar = Vec::new();
    for (r, label) in [7u8, 2].into_iter().enumerate() {
        let mut px = [0u8; 3072];
        px.iter_mut()
            .enumerate()
            .for_each(|(i, p)| *p = ((i * 7 + r) % 256) as u8);
        cifar.extend(encode_cifar_record(label, &px));
    }
    let ds = cifar10_from_bytes(&cifar, Split::Train).unwrap();
    let mut again = Vec::new();
    for i in 0..ds.len() {
        let mut px = [0u8; 3072];
        px.iter_mut()
            .zip(ds.inputs.row(i))
            .for_each(|(p, v)| *p = (v * 255.0).round() as u8);
        again.extend(encode_cifar_record(ds.labels[i] as u8, &px));
    }
    let cifar_round_trip = again == cifar;
    for r in 0..2 {
        for v in 10..=255u8 {
            let mut bad = cifar.clone();
            bad[r * 3073] = v;
            tried += 1;
            rejected += cifar10_from_bytes(&bad, Split::Train).is_err() as usize;
        }
    }
    outcome(
        round_trip && cifar_round_trip && rejected == tried,
        format!("IDX round trip {round_trip}, CIFAR round trip {cifar_round_trip}; {rejected}/{tried} header corruptions rejected"),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: &str, name: &str, run: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = run();
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {id:>2} {name}: {} [{:.1}s]",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        std::io::stdout().flush().ok();
        if !o.passed {
            failed += 1;
        }
    };
    report("1", "gradient consistency", &mut gradient_suite);
    report("2", "boosted potential identities", &mut potential_identities);
    report("3", "hessian verification", &mut hessians);
    report("4", "ordering window", &mut ordering_window);
    report("11", "format parsers", &mut parsers);
    report("10", "determinism", &mut determinism);

    let (mut cnn, real) = cnn_config();
    cnn.diagnostics.norm_term_all_steps = true;
    let label = if real {
        "CIFAR-10 subset"
    } else {
        "[synthetic substitute]"
    };
    let cnn_data = load_data(&cnn.dataset).unwrap();
    report("5", &format!("boundedness contrast {label}"), &mut || {
        boundedness(&cnn, &cnn_data)
    });
    report("6", "MNIST linear vs sigmoid trend", &mut mnist_trend);

    let heads = [
        cnn.head_for(HeadKind::SoftmaxCe),
        cnn.head_for(HeadKind::ExpGb),
        cnn.head_for(HeadKind::Pow3Gb),
    ];
    let start = Instant::now();
    let cmp = compare_heads_on(&cnn, &heads, &cnn_data).unwrap();
    println!(
        "     shared CNN comparison {label}: {:.1}s",
        start.elapsed().as_secs_f64()
    );
    for row in &cmp.rows {
        for w in &row.warnings {
            println!("     warning {}: {w}", row.head.kind);
        }
    }
    report("7", &format!("boosted heads beat softmax early {label}"), &mut || {
        gb_trend(&cmp)
    });
    report("8", &format!("hidden-layer RMS amplification {label}"), &mut || {
        rms_amplification(&cnn, &cmp)
    });
    report("9", &format!("normalization term {label}"), &mut || {
        normalization_term(&cmp, cnn_data.num_classes())
    });
    println!("SKIP 12 large-scale image classification and segmentation results: not reproducible at desk scale");

    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
