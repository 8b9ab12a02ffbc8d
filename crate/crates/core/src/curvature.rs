//! Single-output second derivatives of the squared error `½(f(x) − t)²` for
//! linear, softmax (denominator `s` held fixed), exponential and cubic outputs,
//! the derivatives of the boosted deltas, and a pointwise comparison of the
//! leading Hessian terms.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::heads::HeadKind;

/// Step used by the finite-difference cross-checks in this module.
pub const FD_STEP: f64 = 1e-4;

/// A single logit `x`, target `t`, and softmax denominator proxy `s > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvaturePoint {
    pub x: f64,
    pub t: f64,
    pub s: f64,
}

impl CurvaturePoint {
    pub fn new(x: f64, t: f64, s: f64) -> Result<Self> {
        if !(s > 0.0) {
            return Err(Error::Domain(format!("normalization proxy s = {s} must be positive")));
        }
        Ok(Self { x, t, s })
    }
}

pub fn hessian_linear(_p: &CurvaturePoint) -> f64 {
    1.0
}

/// `e^{2x}/s² − (eˣ/s)(t − eˣ/s)`.
pub fn hessian_softmax(p: &CurvaturePoint) -> f64 {
    let y = p.x.exp() / p.s;
    y * y - y * (p.t - y)
}

/// `e^{2x} − eˣ(t − eˣ)`.
pub fn hessian_exp(p: &CurvaturePoint) -> f64 {
    let y = p.x.exp();
    y * y - y * (p.t - y)
}

/// `9x⁴ − 6x(t − x³)`.
pub fn hessian_pow3(p: &CurvaturePoint) -> f64 {
    let x = p.x;
    9.0 * x.powi(4) - 6.0 * x * (-x.powi(3) + p.t)
}

/// Derivative of the delta each head imposes, per logit: `α·eˣ` for
/// `exp_gb`, `3α·x²` for `pow3_gb`, and 1 for `softmax_ce`.
pub fn gb_second_derivative(kind: HeadKind, x: f64, alpha: f64) -> Result<f64> {
    match kind {
        HeadKind::ExpGb => Ok(alpha * x.exp()),
        HeadKind::Pow3Gb => Ok(3.0 * alpha * x * x),
        HeadKind::SoftmaxCe => Ok(1.0),
        other => Err(Error::Config(format!(
            "no boosted second derivative for head `{other}`"
        ))),
    }
}

/// Which of the four squared-error Hessians to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Linear,
    Softmax,
    Exp,
    Pow3,
}

impl OutputActivation {
    pub const ALL: [OutputActivation; 4] = [
        OutputActivation::Linear,
        OutputActivation::Softmax,
        OutputActivation::Exp,
        OutputActivation::Pow3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OutputActivation::Linear => "linear",
            OutputActivation::Softmax => "softmax",
            OutputActivation::Exp => "exp",
            OutputActivation::Pow3 => "pow3",
        }
    }

    pub fn hessian(self, p: &CurvaturePoint) -> f64 {
        match self {
            OutputActivation::Linear => hessian_linear(p),
            OutputActivation::Softmax => hessian_softmax(p),
            OutputActivation::Exp => hessian_exp(p),
            OutputActivation::Pow3 => hessian_pow3(p),
        }
    }

    /// The generating error `½(f(x) − t)²` at logit `x`.
    pub fn error(self, x: f64, p: &CurvaturePoint) -> f64 {
        let y = match self {
            OutputActivation::Linear => x,
            OutputActivation::Softmax => x.exp() / p.s,
            OutputActivation::Exp => x.exp(),
            OutputActivation::Pow3 => x * x * x,
        };
        0.5 * (y - p.t) * (y - p.t)
    }
}

/// Central second difference `(f(x+h) − 2f(x) + f(x−h)) / h²`.
pub fn central_second_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
}

/// Central first difference `(f(x+h) − f(x−h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// One row of the closed-form vs. finite-difference Hessian table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HessianCheck {
    pub activation: OutputActivation,
    pub point: CurvaturePoint,
    pub closed_form: f64,
    pub finite_difference: f64,
    pub rel_err: f64,
}

pub fn check_hessian(activation: OutputActivation, p: &CurvaturePoint) -> HessianCheck {
    let closed_form = activation.hessian(p);
    let finite_difference = central_second_difference(|x| activation.error(x, p), p.x, FD_STEP);
    HessianCheck {
        activation,
        point: *p,
        closed_form,
        finite_difference,
        rel_err: relative_error(closed_form, finite_difference, 1.0),
    }
}

/// The four leading Hessian terms at one grid point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrderingPoint {
    pub x: f64,
    /// `9x⁴`
    pub pow3: f64,
    /// `e^{2x}`
    pub exp: f64,
    /// `e^{2x}/s²`
    pub softmax: f64,
    /// `1`
    pub linear: f64,
    /// `9x⁴ > e^{2x} > e^{2x}/s² > 1`, all strict.
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderingReport {
    pub s: f64,
    pub points: Vec<OrderingPoint>,
    /// Grid bounds of the longest contiguous run where the chain holds.
    pub longest_window: Option<(f64, f64)>,
}

pub fn first_term_ordering(x_grid: &[f64], s: f64) -> Result<OrderingReport> {
    if !(s > 1.0) {
        return Err(Error::Domain(format!("ordering needs s > 1, got {s}")));
    }
    if x_grid.is_empty() {
        return Err(Error::Domain("empty grid".into()));
    }
    let points: Vec<OrderingPoint> = x_grid
        .iter()
        .map(|&x| {
            let pow3 = 9.0 * x.powi(4);
            let exp = (2.0 * x).exp();
            let softmax = exp / (s * s);
            let linear = 1.0;
            OrderingPoint {
                x,
                pow3,
                exp,
                softmax,
                linear,
                holds: pow3 > exp && exp > softmax && softmax > linear,
            }
        })
        .collect();

    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    for (i, p) in points.iter().enumerate() {
        match (p.holds, start) {
            (true, None) => start = Some(i),
            (false, Some(s0)) => {
                if best.is_none_or(|(b0, b1)| i - s0 > b1 - b0 + 1) {
                    best = Some((s0, i - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s0) = start {
        let end = points.len() - 1;
        if best.is_none_or(|(b0, b1)| end - s0 > b1 - b0) {
            best = Some((s0, end));
        }
    }
    Ok(OrderingReport {
        s,
        longest_window: best.map(|(a, b)| (points[a].x, points[b].x)),
        points,
    })
}

/// Evenly spaced grid `lo, lo+step, …` up to `hi` (inclusive within half a step).
pub fn grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(hi >= lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Domain(format!("bad grid {lo}:{hi}:{step}")));
    }
    let n = ((hi - lo) / step + 0.5).floor() as usize;
    Ok((0..=n).map(|i| lo + i as f64 * step).collect())
}

impl OrderingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,s,pow3_term,exp_term,softmax_term,linear_term,holds\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                p.x, self.s, p.pow3, p.exp, p.softmax, p.linear, p.holds
            );
        }
        out
    }
}

pub fn hessian_table_csv(checks: &[HessianCheck]) -> String {
    let mut out = String::from("activation,x,t,s,closed_form,finite_difference,rel_err\n");
    for c in checks {
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            c.activation.name(),
            c.point.x,
            c.point.t,
            c.point.s,
            c.closed_form,
            c.finite_difference,
            c.rel_err
        );
    }
    out
}
