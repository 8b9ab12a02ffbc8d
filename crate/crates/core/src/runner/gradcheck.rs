//! Finite-difference verification of every backward pass, head delta and
//! Hessian, collected into one report.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::curvature::{
    central_difference, check_hessian, gb_second_derivative, relative_error, CurvaturePoint, OutputActivation,
};
use crate::error::Result;
use crate::heads::{encode_targets, head_delta, loss_value, HeadKind, HeadSpec};
use crate::layers::{dense_backward, dense_forward, Activation, DenseGrads, InitScheme, LayerSpec, Mode, Network};
use crate::tensor::Tensor;

pub const LAYER_THRESHOLD: f64 = 1e-5;
pub const HEAD_THRESHOLD: f64 = 1e-6;
pub const HESSIAN_THRESHOLD: f64 = 1e-4;
pub const HEAD_PAIRS: usize = 200;
pub const HESSIAN_POINTS: usize = 100;

const STEP: f64 = 1e-5;
/// Relative errors are taken against `max(|a|, |b|, REL_FLOOR)`.
const REL_FLOOR: f64 = 1e-3;

pub type DenseBackwardFn = fn(&Tensor, &Tensor, &Tensor) -> Result<DenseGrads>;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckEntry {
    pub component: String,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub samples: usize,
}

impl CheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    pub entries: Vec<CheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(CheckEntry::passed)
    }

    pub fn entry(&self, component: &str) -> Option<&CheckEntry> {
        self.entries.iter().find(|e| e.component == component)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckEntry> {
        self.entries.iter().filter(|e| !e.passed())
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<28} {:>12} {:>10} {:>8}  result",
            "component", "max_rel_err", "threshold", "samples"
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<28} {:>12.3e} {:>10.0e} {:>8}  {}",
                e.component,
                e.max_rel_err,
                e.threshold,
                e.samples,
                if e.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

struct Tracker {
    max: f64,
    samples: usize,
}

impl Tracker {
    fn new() -> Self {
        Self { max: 0.0, samples: 0 }
    }

    fn add(&mut self, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric, REL_FLOOR);
        // NaN must count as a failure.
        self.max = if e.is_nan() || self.max.is_nan() {
            f64::NAN
        } else {
            self.max.max(e)
        };
        self.samples += 1;
    }

    fn entry(self, component: &str, threshold: f64) -> CheckEntry {
        CheckEntry {
            component: component.to_owned(),
            max_rel_err: if self.max.is_nan() { f64::INFINITY } else { self.max },
            threshold,
            samples: self.samples,
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

fn weighted_sum(y: &Tensor, c: &Tensor) -> f64 {
    y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

/// Central difference of `f` with respect to `t[i]`.
fn fd_component(t: &mut Tensor, i: usize, mut f: impl FnMut(&Tensor) -> f64) -> f64 {
    let orig = t.data()[i];
    t.data_mut()[i] = orig + STEP;
    let plus = f(t);
    t.data_mut()[i] = orig - STEP;
    let minus = f(t);
    t.data_mut()[i] = orig;
    (plus - minus) / (2.0 * STEP)
}

fn check_dense(rng: &mut ChaCha8Rng, backward: DenseBackwardFn) -> CheckEntry {
    let mut tr = Tracker::new();
    for _ in 0..3 {
        let mut x = randn(rng, &[4, 5], 1.0);
        let mut w = randn(rng, &[5, 3], 0.5);
        let mut b = randn(rng, &[3], 0.5);
        let c = randn(rng, &[4, 3], 1.0);
        let Ok(g) = backward(&x, &w, &c) else {
            return Tracker {
                max: f64::NAN,
                samples: 0,
            }
            .entry("dense", LAYER_THRESHOLD);
        };
        let (w0, b0, x0) = (w.clone(), b.clone(), x.clone());
        for i in 0..x.len() {
            let n = fd_component(&mut x, i, |x| weighted_sum(&dense_forward(x, &w0, &b0).unwrap(), &c));
            tr.add(g.delta_in.data()[i], n);
        }
        for i in 0..w.len() {
            let n = fd_component(&mut w, i, |w| weighted_sum(&dense_forward(&x0, w, &b0).unwrap(), &c));
            tr.add(g.grad_w.data()[i], n);
        }
        for i in 0..b.len() {
            let n = fd_component(&mut b, i, |b| weighted_sum(&dense_forward(&x0, &w0, b).unwrap(), &c));
            tr.add(g.grad_b.data()[i], n);
        }
    }
    tr.entry("dense", LAYER_THRESHOLD)
}

/// Finite differences of `Σ c ⊙ net(x)` against the network's backward pass,
/// over every input component and parameter.
fn check_network(net: &mut Network, x: &Tensor, rng: &mut ChaCha8Rng, tr: &mut Tracker) -> Result<()> {
    let mut out_shape = vec![x.shape()[0]];
    out_shape.extend_from_slice(net.output_shape());
    let c = randn(rng, &out_shape, 1.0);
    net.forward(x, Mode::Train)?;
    let grads = net.backward(&c)?;
    let objective = |net: &mut Network, x: &Tensor| weighted_sum(&net.forward(x, Mode::Train).unwrap(), &c);

    let mut xv = x.clone();
    for i in 0..xv.len() {
        let orig = xv.data()[i];
        xv.data_mut()[i] = orig + STEP;
        let plus = objective(net, &xv);
        xv.data_mut()[i] = orig - STEP;
        let minus = objective(net, &xv);
        xv.data_mut()[i] = orig;
        tr.add(grads.input_deltas[0].data()[i], (plus - minus) / (2.0 * STEP));
    }
    for l in 0..net.layers().len() {
        for p in 0..net.layers()[l].params().len() {
            for i in 0..net.layers()[l].params()[p].len() {
                let orig = net.layers()[l].params()[p].data()[i];
                net.layers_mut()[l].params_mut()[p].data_mut()[i] = orig + STEP;
                let plus = objective(net, x);
                net.layers_mut()[l].params_mut()[p].data_mut()[i] = orig - STEP;
                let minus = objective(net, x);
                net.layers_mut()[l].params_mut()[p].data_mut()[i] = orig;
                tr.add(grads.params[l][p].data()[i], (plus - minus) / (2.0 * STEP));
            }
        }
    }
    Ok(())
}

fn perturb_params(net: &mut Network, rng: &mut ChaCha8Rng) {
    for layer in net.layers_mut() {
        for p in layer.params_mut() {
            for v in p.data_mut() {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

fn network_entry(
    component: &str,
    sample_shape: &[usize],
    batch: usize,
    specs: &[LayerSpec],
    rng: &mut ChaCha8Rng,
    avoid_kink: bool,
) -> CheckEntry {
    let mut tr = Tracker::new();
    let result = (|| -> Result<()> {
        let mut net = Network::new(sample_shape, specs)?;
        net.init_parameters(InitScheme::Xavier, rng.random());
        // Nonzero shifts and scales so every parameter matters.
        perturb_params(&mut net, rng);
        let mut shape = vec![batch];
        shape.extend_from_slice(sample_shape);
        let mut x = randn(rng, &shape, 1.0);
        if avoid_kink {
            // Keep ReLU inputs clear of the non-differentiable point.
            x = x.map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v });
        }
        check_network(&mut net, &x, rng, &mut tr)
    })();
    if result.is_err() {
        tr.max = f64::NAN;
    }
    tr.entry(component, LAYER_THRESHOLD)
}

fn check_head(kind: HeadKind, rng: &mut ChaCha8Rng) -> CheckEntry {
    let spec = HeadSpec::default_for(kind);
    let classes = 10;
    let mut tr = Tracker::new();
    for _ in 0..HEAD_PAIRS {
        let mut logits = randn(rng, &[1, classes], 2.0);
        let t = encode_targets(rng.random_range(0..classes), classes, &spec).expect("valid class");
        let targets = t.values.reshape(vec![1, classes]).expect("row");
        let delta = head_delta(&logits, &targets, &spec).expect("shapes agree");
        for i in 0..classes {
            let n = fd_component(&mut logits, i, |l| loss_value(l, &targets, &spec).unwrap());
            tr.add(delta.data()[i], n);
        }
    }
    tr.entry(&format!("head {}", kind.name()), HEAD_THRESHOLD)
}

/// The boosted deltas are derivatives of `α·eˣ − t·x` (exp) and
/// `α·x⁴/4 + (β − t)·x` (pow3).
fn check_potential(kind: HeadKind, rng: &mut ChaCha8Rng) -> CheckEntry {
    let spec = HeadSpec::default_for(kind);
    let (a, b) = (spec.alpha, spec.beta);
    let mut tr = Tracker::new();
    for _ in 0..HEAD_PAIRS {
        let x: f64 = rng.random_range(-5.0..5.0);
        let t = if rng.random::<bool>() {
            spec.target_pos
        } else {
            spec.target_neg
        };
        let potential = |x: f64| match kind {
            HeadKind::ExpGb => a * x.exp() - t * x,
            _ => a * x.powi(4) / 4.0 + (b - t) * x,
        };
        let delta = head_delta(&Tensor::vector(vec![x]), &Tensor::vector(vec![t]), &spec)
            .expect("scalar")
            .data()[0];
        tr.add(delta, central_difference(potential, x, STEP));
    }
    tr.entry(&format!("potential {}", kind.name()), HEAD_THRESHOLD)
}

fn check_hessians(activation: OutputActivation, rng: &mut ChaCha8Rng) -> CheckEntry {
    let mut tr = Tracker::new();
    for _ in 0..HESSIAN_POINTS {
        let p = CurvaturePoint::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.0..2.0),
            rng.random_range(1.0..20.0),
        )
        .expect("positive s");
        let check = check_hessian(activation, &p);
        tr.max = tr.max.max(check.rel_err);
        if check.rel_err.is_nan() {
            tr.max = f64::NAN;
        }
        tr.samples += 1;
    }
    tr.entry(&format!("hessian {}", activation.name()), HESSIAN_THRESHOLD)
}

fn check_gb_second(kind: HeadKind, rng: &mut ChaCha8Rng) -> CheckEntry {
    let spec = HeadSpec::default_for(kind);
    let mut tr = Tracker::new();
    for _ in 0..HESSIAN_POINTS {
        let x: f64 = rng.random_range(-4.0..4.0);
        let t = spec.target_pos;
        let delta = |x: f64| {
            head_delta(&Tensor::vector(vec![x]), &Tensor::vector(vec![t]), &spec)
                .unwrap()
                .data()[0]
        };
        let analytic = gb_second_derivative(kind, x, spec.alpha).expect("boosting head");
        tr.add(analytic, central_difference(delta, x, STEP));
    }
    tr.entry(&format!("second derivative {}", kind.name()), HEAD_THRESHOLD)
}

/// Runs every finite-difference suite with the library's own backward passes.
pub fn check_gradients(seed: u64) -> GradCheckReport {
    check_gradients_with(seed, dense_backward)
}

/// Like [`check_gradients`], but checks `dense` against the given backward
/// function, so a corrupted implementation can be shown to be caught.
pub fn check_gradients_with(seed: u64, dense: DenseBackwardFn) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = vec![check_dense(&mut rng, dense)];
    entries.push(network_entry(
        "conv2d",
        &[2, 5, 5],
        2,
        &[LayerSpec::conv2d(2, 3, 3, 2, 1)],
        &mut rng,
        false,
    ));
    entries.push(network_entry(
        "batchnorm dense",
        &[4],
        6,
        &[LayerSpec::batchnorm(4)],
        &mut rng,
        false,
    ));
    entries.push(network_entry(
        "batchnorm spatial",
        &[2, 3, 3],
        3,
        &[LayerSpec::batchnorm(2)],
        &mut rng,
        false,
    ));
    for function in [
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Identity,
    ] {
        let name = format!(
            "activation {}",
            serde_json::to_value(function).unwrap().as_str().unwrap_or("?")
        );
        entries.push(network_entry(
            &name,
            &[7],
            3,
            &[LayerSpec::activation(function)],
            &mut rng,
            true,
        ));
    }
    let mlp = [
        LayerSpec::dense(5, 6),
        LayerSpec::activation(Activation::Tanh),
        LayerSpec::dense(6, 4),
        LayerSpec::activation(Activation::Sigmoid),
        LayerSpec::dense(4, 3),
    ];
    entries.push(network_entry("network mlp", &[5], 4, &mlp, &mut rng, false));
    let cnn = [
        LayerSpec::conv2d(2, 3, 3, 1, 1),
        LayerSpec::batchnorm(3),
        LayerSpec::activation(Activation::Tanh),
        LayerSpec::Flatten,
        LayerSpec::dense(48, 3),
    ];
    entries.push(network_entry("network cnn", &[2, 4, 4], 3, &cnn, &mut rng, false));
    for kind in [
        HeadKind::SoftmaxCe,
        HeadKind::LinearMse,
        HeadKind::SigmoidMse,
        HeadKind::TanhMse,
    ] {
        entries.push(check_head(kind, &mut rng));
    }
    for kind in [HeadKind::ExpGb, HeadKind::Pow3Gb] {
        entries.push(check_potential(kind, &mut rng));
    }
    for activation in OutputActivation::ALL {
        entries.push(check_hessians(activation, &mut rng));
    }
    for kind in [HeadKind::ExpGb, HeadKind::Pow3Gb] {
        entries.push(check_gb_second(kind, &mut rng));
    }
    GradCheckReport { seed, entries }
}
