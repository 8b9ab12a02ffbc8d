//! Output heads: how logits become outputs, how class labels become target
//! vectors, and which error delta is handed to backpropagation.
//!
//! | kind          | output `y`          | delta at the logits `x`     |
//! |---------------|---------------------|-----------------------------|
//! | `softmax_ce`  | `softmax(x)`        | `y − t`, `t ∈ {0,1}`        |
//! | `linear_mse`  | `x`                 | `x − t`                     |
//! | `sigmoid_mse` | `σ(x)`              | `(σ(x) − t)·σ'(x)`          |
//! | `tanh_mse`    | `tanh(x)`           | `(tanh(x) − t)·tanh'(x)`    |
//! | `exp_gb`      | `α·eˣ`              | `α·eˣ − t`                  |
//! | `pow3_gb`     | `α·x³ + β`          | `α·x³ + β − t`              |
//!
//! For the first four rows the delta is the exact gradient of the per-example
//! loss (cross-entropy, or `½‖y − t‖²`). The two gradient-boosting heads impose
//! `y − t` on an exponential or cubic output without the chain-rule factor, so
//! their delta is *not* the gradient of the squared error they report; it is
//! the derivative of the potential `α·eˣ − t·x` (resp. `α·x⁴/4 + (β − t)·x`).
//!
//! The exponential head clamps logits at [`EXP_CLAMP`] before exponentiating.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, sigmoid, Tensor};

/// Logits above this value are clamped before `exp` in the `exp_gb` head.
pub const EXP_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    SoftmaxCe,
    LinearMse,
    SigmoidMse,
    TanhMse,
    ExpGb,
    Pow3Gb,
}

impl HeadKind {
    pub const ALL: [HeadKind; 6] = [
        HeadKind::SoftmaxCe,
        HeadKind::LinearMse,
        HeadKind::SigmoidMse,
        HeadKind::TanhMse,
        HeadKind::ExpGb,
        HeadKind::Pow3Gb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::SoftmaxCe => "softmax_ce",
            HeadKind::LinearMse => "linear_mse",
            HeadKind::SigmoidMse => "sigmoid_mse",
            HeadKind::TanhMse => "tanh_mse",
            HeadKind::ExpGb => "exp_gb",
            HeadKind::Pow3Gb => "pow3_gb",
        }
    }

    /// Whether `head_delta` is the true gradient of `loss_value`.
    pub fn delta_is_loss_gradient(self) -> bool {
        !matches!(self, HeadKind::ExpGb | HeadKind::Pow3Gb)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown head kind `{s}`")))
    }
}

/// Head kind plus its gain `alpha`, offset `beta` and one-hot target
/// magnitudes. Kinds that do not use `alpha`/`beta` still carry them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHeadSpec")]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub alpha: f64,
    pub beta: f64,
    pub target_pos: f64,
    pub target_neg: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHeadSpec {
    kind: HeadKind,
    alpha: Option<f64>,
    beta: Option<f64>,
    target_pos: Option<f64>,
    target_neg: Option<f64>,
}

impl TryFrom<RawHeadSpec> for HeadSpec {
    type Error = Error;

    fn try_from(raw: RawHeadSpec) -> Result<Self> {
        let d = HeadSpec::default_for(raw.kind);
        let spec = HeadSpec {
            kind: raw.kind,
            alpha: raw.alpha.unwrap_or(d.alpha),
            beta: raw.beta.unwrap_or(d.beta),
            target_pos: raw.target_pos.unwrap_or(d.target_pos),
            target_neg: raw.target_neg.unwrap_or(d.target_neg),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl HeadSpec {
    /// Defaults: `exp_gb` α = 0.1 with targets {0, 16}; `pow3_gb` α = 0.001,
    /// β = 0.4 with targets {0, 10}; everything else α = 1, β = 0, targets {0, 1}.
    pub fn default_for(kind: HeadKind) -> Self {
        let (alpha, beta, target_pos) = match kind {
            HeadKind::ExpGb => (0.1, 0.0, 16.0),
            HeadKind::Pow3Gb => (0.001, 0.4, 10.0),
            _ => (1.0, 0.0, 1.0),
        };
        HeadSpec {
            kind,
            alpha,
            beta,
            target_pos,
            target_neg: 0.0,
        }
    }

    pub fn softmax_ce() -> Self {
        Self::default_for(HeadKind::SoftmaxCe)
    }

    pub fn exp_gb(alpha: f64, target_pos: f64, target_neg: f64) -> Self {
        HeadSpec {
            alpha,
            target_pos,
            target_neg,
            ..Self::default_for(HeadKind::ExpGb)
        }
    }

    pub fn pow3_gb(alpha: f64, beta: f64, target_pos: f64, target_neg: f64) -> Self {
        HeadSpec {
            kind: HeadKind::Pow3Gb,
            alpha,
            beta,
            target_pos,
            target_neg,
        }
    }

    pub fn with_targets(self, target_pos: f64, target_neg: f64) -> Self {
        HeadSpec {
            target_pos,
            target_neg,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha, self.beta, self.target_pos, self.target_neg]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config(format!("{}: non-finite head parameter", self.kind)));
        }
        if !(self.target_pos > self.target_neg) {
            return Err(Error::Config(format!(
                "{}: target_pos {} must exceed target_neg {}",
                self.kind, self.target_pos, self.target_neg
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("{}: alpha must be positive", self.kind)));
        }
        if self.kind == HeadKind::SoftmaxCe && (self.target_pos != 1.0 || self.target_neg != 0.0) {
            return Err(Error::Config(
                "softmax_ce needs targets {0, 1}; cross-entropy assumes a distribution".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetVector {
    pub values: Tensor,
    pub class_index: usize,
}

pub fn encode_targets(class_index: usize, num_classes: usize, spec: &HeadSpec) -> Result<TargetVector> {
    if class_index >= num_classes {
        return Err(Error::Domain(format!(
            "class {class_index} out of range for {num_classes} classes"
        )));
    }
    let mut values = vec![spec.target_neg; num_classes];
    values[class_index] = spec.target_pos;
    Ok(TargetVector {
        values: Tensor::vector(values),
        class_index,
    })
}

/// Stacks encoded targets for a batch of labels into `batch × num_classes`.
pub fn encode_batch(labels: &[usize], num_classes: usize, spec: &HeadSpec) -> Result<Tensor> {
    let mut data = Vec::with_capacity(labels.len() * num_classes);
    for &label in labels {
        data.extend_from_slice(encode_targets(label, num_classes, spec)?.values.data());
    }
    Tensor::new(vec![labels.len(), num_classes], data)
}

/// Softmax of one row, shifted by the row maximum so no exponent is positive.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn rows_of(logits: &Tensor) -> Result<(usize, usize)> {
    match *logits.shape() {
        [b, n] => Ok((b, n)),
        [n] => Ok((1, n)),
        _ => Err(Error::dim(format!(
            "logits must be batch×classes, got {:?}",
            logits.shape()
        ))),
    }
}

/// Row-wise softmax of `batch × n` logits (a vector is treated as one row).
pub fn softmax(logits: &Tensor) -> Tensor {
    let (_, n) = rows_of(logits).expect("softmax expects rank-1 or rank-2 logits");
    let mut out = logits.clone();
    for (src, dst) in logits.data().chunks_exact(n).zip(out.data_mut().chunks_exact_mut(n)) {
        softmax_row(src, dst);
    }
    out
}

#[inline]
fn exp_gb_output(alpha: f64, x: f64) -> f64 {
    alpha * x.min(EXP_CLAMP).exp()
}

pub fn head_outputs(logits: &Tensor, spec: &HeadSpec) -> Tensor {
    let (a, b) = (spec.alpha, spec.beta);
    match spec.kind {
        HeadKind::SoftmaxCe => softmax(logits),
        HeadKind::LinearMse => logits.clone(),
        HeadKind::SigmoidMse => logits.map(sigmoid),
        HeadKind::TanhMse => logits.map(f64::tanh),
        HeadKind::ExpGb => logits.map(|x| exp_gb_output(a, x)),
        HeadKind::Pow3Gb => logits.map(|x| a * x * x * x + b),
    }
}

fn check_softmax_targets(targets: &Tensor) -> Result<()> {
    if targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Config("softmax_ce targets must be 0 or 1".into()));
    }
    Ok(())
}

/// Per-example delta at the logits. See [`head_delta_counted`] for the
/// number of clamped exponentials.
pub fn head_delta(logits: &Tensor, targets: &Tensor, spec: &HeadSpec) -> Result<Tensor> {
    head_delta_counted(logits, targets, spec).map(|(d, _)| d)
}

/// Per-example delta at the logits, plus how many logits hit [`EXP_CLAMP`]
/// (always 0 for heads other than `exp_gb`).
pub fn head_delta_counted(logits: &Tensor, targets: &Tensor, spec: &HeadSpec) -> Result<(Tensor, usize)> {
    targets.expect_shape(logits.shape())?;
    let (a, b) = (spec.alpha, spec.beta);
    let mut clamped = 0;
    let delta = match spec.kind {
        HeadKind::SoftmaxCe => {
            check_softmax_targets(targets)?;
            softmax(logits).zip_map(targets, |y, t| y - t)?
        }
        HeadKind::LinearMse => logits.zip_map(targets, |x, t| x - t)?,
        HeadKind::SigmoidMse => logits.zip_map(targets, |x, t| {
            let s = sigmoid(x);
            (s - t) * s * (1.0 - s)
        })?,
        HeadKind::TanhMse => logits.zip_map(targets, |x, t| {
            let y = x.tanh();
            (y - t) * (1.0 - y * y)
        })?,
        HeadKind::ExpGb => {
            clamped = logits.data().iter().filter(|&&x| x > EXP_CLAMP).count();
            logits.zip_map(targets, |x, t| exp_gb_output(a, x) - t)?
        }
        HeadKind::Pow3Gb => logits.zip_map(targets, |x, t| a * x * x * x + b - t)?,
    };
    Ok((delta, clamped))
}

/// Batch-mean monitoring loss: cross-entropy for `softmax_ce`, otherwise
/// `½‖y − t‖²` between [`head_outputs`] and the targets. For the boosting heads
/// this is reported only; its gradient is not what [`head_delta`] returns.
pub fn loss_value(logits: &Tensor, targets: &Tensor, spec: &HeadSpec) -> Result<f64> {
    targets.expect_shape(logits.shape())?;
    let (batch, n) = rows_of(logits)?;
    let total: f64 = match spec.kind {
        HeadKind::SoftmaxCe => {
            check_softmax_targets(targets)?;
            logits
                .data()
                .chunks_exact(n)
                .zip(targets.data().chunks_exact(n))
                .map(|(x, t)| {
                    let lse = normalization_term(x).log_s;
                    x.iter().zip(t).map(|(xi, ti)| ti * (lse - xi)).sum::<f64>()
                })
                .sum()
        }
        _ => {
            let y = head_outputs(logits, spec);
            0.5 * y
                .data()
                .iter()
                .zip(targets.data())
                .map(|(y, t)| (y - t) * (y - t))
                .sum::<f64>()
        }
    };
    Ok(total / batch as f64)
}

/// The softmax denominator `s = Σ eˣⁱ` of one row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormTerm {
    pub s: f64,
    pub log_s: f64,
    /// `s` exceeded the largest finite `f64` and is reported as `+∞`.
    pub saturated: bool,
}

pub fn normalization_term(row: &[f64]) -> NormTerm {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_s = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let s = log_s.exp();
    NormTerm {
        s,
        log_s,
        saturated: s.is_infinite(),
    }
}

/// Predicted class per row: the argmax of the logits, lowest index on ties.
/// Every head's output map is order-preserving, so this is also the argmax of
/// [`head_outputs`].
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let n = logits.shape().last().copied().unwrap_or(1);
    logits.data().chunks_exact(n).map(argmax).collect()
}
