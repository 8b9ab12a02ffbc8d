use std::fs;

use gbnn::datasets::Split;
use gbnn::diagnostics::{DiagnosticsRecord, ERRORS_CSV, NORMTERM_CSV, RMS_CSV};
use gbnn::heads::{HeadKind, HeadSpec};
use gbnn::layers::{dense_backward, DenseGrads};
use gbnn::runner::{
    build_network, check_gradients, check_gradients_with, compare_heads_on, error_rate, load_data, run_trials_on,
    train_run, RunConfig, TrialStatus,
};
use gbnn::Tensor;

fn blobs(head: &str, lr: f64, epochs: usize, trials: usize) -> RunConfig {
    RunConfig::from_json(&format!(
        r#"{{
        "dataset": {{"source": "blobs", "classes": 4, "dim": 10, "spread": 0.15,
                    "train_per_class": 50, "test_per_class": 25, "seed": 4}},
        "model": {{"layers": [
            {{"kind": "dense", "inputs": 10, "outputs": 16}},
            {{"kind": "activation", "function": "relu"}},
            {{"kind": "dense", "inputs": 16, "outputs": 4}}
        ]}},
        "head": {{"kind": "{head}"}},
        "optim": {{"lr": {lr}, "batch_size": 10, "epochs": {epochs},
                  "lr_by_head": {{"exp_gb": 0.01, "pow3_gb": 0.005}}}},
        "run": {{"seed": 3, "trials": {trials}}}
    }}"#
    ))
    .unwrap()
}

#[test]
fn linear_head_learns_separable_blobs() {
    let cfg = blobs("linear_mse", 0.05, 20, 1);
    let data = load_data(&cfg.dataset).unwrap();
    // Oracle: nearest class mean of the training split classifies the test split.
    let dim = data.train.inputs.row_len();
    let mut means = vec![vec![0.0; dim]; 4];
    let mut counts = [0usize; 4];
    for i in 0..data.train.len() {
        counts[data.train.labels[i]] += 1;
        for (m, v) in means[data.train.labels[i]].iter_mut().zip(data.train.inputs.row(i)) {
            *m += v;
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    let oracle_wrong = (0..data.test.len())
        .filter(|&i| {
            let x = data.test.inputs.row(i);
            let d = |c: usize| x.iter().zip(&means[c]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (0..4).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap() != data.test.labels[i]
        })
        .count();
    assert_eq!(oracle_wrong, 0, "blobs should be separable");

    let out = train_run(&cfg, &data, 0).unwrap();
    let (_, final_err) = *out.record.error_curve(Split::Test).last().unwrap();
    assert!(final_err < 0.05, "test error {final_err}");
}

#[test]
fn untrained_error_matches_fresh_network() {
    let cfg = blobs("softmax_ce", 0.5, 1, 1);
    let data = load_data(&cfg.dataset).unwrap();
    let net = build_network(&cfg, &data.sample_shape(), 4, 7).unwrap();
    let again = build_network(&cfg, &data.sample_shape(), 4, 7).unwrap();
    let e = error_rate(&net, &data.test, 17, None).unwrap();
    assert_eq!(e, error_rate(&again, &data.test, 100, None).unwrap());
    assert!((0.0..=1.0).contains(&e));
}

#[test]
fn same_config_and_seed_give_identical_csv_bytes() {
    let cfg = blobs("exp_gb", 0.01, 3, 1);
    let data = load_data(&cfg.dataset).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train_run(&cfg, &data, 5).unwrap().record.emit_csv(a.path()).unwrap();
    train_run(&cfg, &data, 5).unwrap().record.emit_csv(b.path()).unwrap();
    for f in [ERRORS_CSV, RMS_CSV, NORMTERM_CSV] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn emitted_csv_reloads_to_identical_bytes() {
    let cfg = blobs("softmax_ce", 0.5, 4, 1);
    let data = load_data(&cfg.dataset).unwrap();
    let rec = train_run(&cfg, &data, 1).unwrap().record;
    let a = tempfile::tempdir().unwrap();
    rec.emit_csv(a.path()).unwrap();
    let back = DiagnosticsRecord::load_csv(a.path()).unwrap();
    assert_eq!(back.errors, rec.errors);
    assert_eq!(back.rms, rec.rms);
    assert_eq!(back.histograms, rec.histograms);
    let b = tempfile::tempdir().unwrap();
    back.emit_csv(b.path()).unwrap();
    for f in ["errors.csv", "rms.csv", "hist.csv", "normterm.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    // Writing again over the same directory is idempotent.
    rec.emit_csv(a.path()).unwrap();
    back.emit_csv(b.path()).unwrap();
    assert_eq!(
        fs::read(a.path().join("hist.csv")).unwrap(),
        fs::read(b.path().join("hist.csv")).unwrap()
    );
}

#[test]
fn norm_term_trace_matches_recomputation() {
    let mut rec = DiagnosticsRecord::new();
    let logits = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![3.0, 0.0, 0.0]]).unwrap();
    rec.record_norm_term(0, &logits).unwrap();
    let direct: f64 = logits
        .data()
        .chunks(3)
        .map(|r| r.iter().map(|v| v.exp()).sum::<f64>().ln())
        .sum::<f64>()
        / 2.0;
    assert!((rec.norm_terms[0].log_s - direct).abs() < 1e-12);
    assert!(rec.norm_terms[0].s > 1.0);
}

#[test]
fn rms_trace_matches_offline_recomputation() {
    let cfg = blobs("linear_mse", 0.05, 1, 1);
    let data = load_data(&cfg.dataset).unwrap();
    let mut net = build_network(&cfg, &data.sample_shape(), 4, 0).unwrap();
    let (x, labels) = data.train.gather(&[0, 1, 2, 3, 4]);
    let t = gbnn::heads::encode_batch(&labels, 4, &cfg.head).unwrap();
    let logits = net.forward(&x, gbnn::layers::Mode::Train).unwrap();
    let delta = gbnn::heads::head_delta(&logits, &t, &cfg.head).unwrap();
    let grads = net.backward(&delta).unwrap();
    let kinds: Vec<&str> = net.layers().iter().map(|l| l.kind_name()).collect();
    let mut rec = DiagnosticsRecord::new();
    rec.record_rms_gradients(1, &kinds, &grads).unwrap();
    let mut scaled = DiagnosticsRecord::new();
    let grads10 = net.backward(&delta.scale(10.0)).unwrap();
    scaled.record_rms_gradients(1, &kinds, &grads10).unwrap();
    for (i, d) in grads.input_deltas.iter().enumerate() {
        let offline = (d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
        assert!((rec.rms[i].rms_delta - offline).abs() <= 1e-12 * offline.max(1.0));
        assert!((scaled.rms[i].rms_delta - 10.0 * offline).abs() <= 1e-9 * offline.max(1.0));
    }
}

#[test]
fn comparison_ratios_match_per_head_csv() {
    let cfg = blobs("softmax_ce", 0.5, 4, 3);
    let data = load_data(&cfg.dataset).unwrap();
    let heads = [
        HeadSpec::softmax_ce(),
        HeadSpec::default_for(HeadKind::ExpGb),
        HeadSpec::default_for(HeadKind::Pow3Gb),
    ];
    let cmp = compare_heads_on(&cfg, &heads, &data).unwrap();
    assert_eq!(cmp.rows.len(), 3);
    let dir = tempfile::tempdir().unwrap();
    cmp.write(dir.path()).unwrap();

    // Recompute each head's median convergence epoch from its trials' errors.csv files.
    let mut medians = Vec::new();
    for (i, h) in heads.iter().enumerate() {
        let mut epochs = Vec::new();
        for t in 0..3 {
            let text = fs::read_to_string(dir.path().join(format!("{i}_{}/trial_{t}/errors.csv", h.kind))).unwrap();
            let test: Vec<(usize, f64)> = text
                .lines()
                .skip(1)
                .map(|l| l.split(',').collect::<Vec<_>>())
                .filter(|f| f[1] == "test")
                .map(|f| (f[0].parse().unwrap(), f[2].parse().unwrap()))
                .collect();
            let best = test.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            epochs.push(test.iter().find(|p| p.1 == best).unwrap().0 as f64);
        }
        epochs.sort_by(f64::total_cmp);
        medians.push(epochs[1]);
    }
    let ratios = fs::read_to_string(dir.path().join("ratios.csv")).unwrap();
    let mut rows = 0;
    for line in ratios.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let a = heads.iter().position(|h| h.kind.name() == f[0]).unwrap();
        let b = heads.iter().position(|h| h.kind.name() == f[1]).unwrap();
        let r: f64 = f[2].parse().unwrap();
        assert_eq!(r, medians[a] / medians[b]);
        rows += 1;
    }
    assert_eq!(rows, 6);
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 9);
}

#[test]
fn paired_heads_see_identical_batches() {
    // Same head twice: every recorded number must agree.
    let cfg = blobs("softmax_ce", 0.5, 2, 2);
    let data = load_data(&cfg.dataset).unwrap();
    let h = HeadSpec::softmax_ce();
    let cmp = compare_heads_on(&cfg, &[h, h], &data).unwrap();
    for (a, b) in cmp.rows[0].trials.iter().zip(&cmp.rows[1].trials) {
        assert_eq!(a.record, b.record);
    }
}

#[test]
fn divergent_trial_does_not_affect_others() {
    let mut cfg = blobs("exp_gb", 0.01, 3, 3);
    cfg.optim.lr = 40.0;
    cfg.optim.lr_by_head.clear();
    cfg.optim.divergence_ceiling = 30.0;
    let data = load_data(&cfg.dataset).unwrap();
    let summary = run_trials_on(&cfg, &data).unwrap();
    assert!(summary
        .trials
        .iter()
        .any(|t| matches!(t.status, TrialStatus::Diverged { .. })));
    // Each trial equals a standalone run with its seed.
    for t in &summary.trials {
        let alone = train_run(&cfg, &data, t.seed).unwrap();
        assert_eq!(alone.record, t.record);
        assert_eq!(alone.status, t.status);
    }
    assert!(!summary.warnings.is_empty());
}

#[test]
fn gradient_report_is_deterministic_and_catches_mutations() {
    let a = check_gradients(7);
    assert!(a.passed(), "{a}");
    assert_eq!(a, check_gradients(7));
    fn flipped_input_delta(x: &Tensor, w: &Tensor, d: &Tensor) -> gbnn::Result<DenseGrads> {
        let mut g = dense_backward(x, w, d)?;
        g.delta_in = g.delta_in.scale(-1.0);
        Ok(g)
    }
    let b = check_gradients_with(7, flipped_input_delta);
    assert!(!b.passed());
    assert!(!b.entry("dense").unwrap().passed());
}
