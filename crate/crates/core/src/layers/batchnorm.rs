//! Batch normalization over the feature axis (axis 1). For `batch×C×H×W`
//! inputs the statistics of channel `c` pool the batch and spatial axes.

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Exponential moving averages used in eval mode:
/// `running = momentum · running + (1 − momentum) · batch`.
/// The variance tracked is the biased batch variance the forward pass divides by.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub mode: Mode,
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads {
    pub delta_in: Tensor,
    pub grad_gamma: Tensor,
    pub grad_shift: Tensor,
}

/// (batch, features, spatial) view of an input of rank 2 or 4.
fn layout(x: &Tensor, features: usize) -> Result<(usize, usize)> {
    let shape = x.shape();
    if !(shape.len() == 2 || shape.len() == 4) || shape[1] != features {
        return Err(Error::dim(format!(
            "batchnorm over {features} features got input {shape:?}"
        )));
    }
    Ok((shape[0], shape[2..].iter().product()))
}

pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &Tensor,
    shift: &Tensor,
    mode: Mode,
    running: &mut RunningStats,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor, BatchNormCache)> {
    let features = gamma.len();
    if shift.len() != features || running.mean.len() != features {
        return Err(Error::dim("batchnorm parameter lengths differ"));
    }
    let (batch, spatial) = layout(x, features)?;
    if mode == Mode::Train && batch < 2 {
        return Err(Error::Domain(
            "batchnorm needs a batch of at least 2 in train mode".into(),
        ));
    }
    let count = (batch * spatial) as f64;
    let data = x.data();
    let lane = |b: usize, f: usize| &data[(b * features + f) * spatial..(b * features + f + 1) * spatial];

    let mut mean = vec![0.0; features];
    let mut var = vec![0.0; features];
    match mode {
        Mode::Train => {
            for f in 0..features {
                let mut s = 0.0;
                for b in 0..batch {
                    s += lane(b, f).iter().sum::<f64>();
                }
                let m = s / count;
                let mut sq = 0.0;
                for b in 0..batch {
                    sq += lane(b, f).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                mean[f] = m;
                var[f] = sq / count;
                running.mean[f] = momentum * running.mean[f] + (1.0 - momentum) * m;
                running.var[f] = momentum * running.var[f] + (1.0 - momentum) * var[f];
            }
        }
        Mode::Eval => {
            mean.copy_from_slice(&running.mean);
            var.copy_from_slice(&running.var);
        }
    }

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut normalized = vec![0.0; data.len()];
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        for f in 0..features {
            let base = (b * features + f) * spatial;
            let (g, s) = (gamma.data()[f], shift.data()[f]);
            for i in base..base + spatial {
                let n = (data[i] - mean[f]) * inv_std[f];
                normalized[i] = n;
                out[i] = g * n + s;
            }
        }
    }
    let cache = BatchNormCache {
        mode,
        normalized: Tensor::new(x.shape().to_vec(), normalized)?,
        inv_std,
    };
    Ok((Tensor::new(x.shape().to_vec(), out)?, cache))
}

/// Exact gradients, including the path through the batch mean and variance
/// when the cache came from a train-mode pass.
pub fn batchnorm_backward(cache: &BatchNormCache, gamma: &Tensor, delta_out: &Tensor) -> Result<BatchNormGrads> {
    let features = gamma.len();
    delta_out.expect_shape(cache.normalized.shape())?;
    let (batch, spatial) = layout(delta_out, features)?;
    let count = (batch * spatial) as f64;
    let dy = delta_out.data();
    let xhat = cache.normalized.data();

    let mut grad_gamma = vec![0.0; features];
    let mut grad_shift = vec![0.0; features];
    for b in 0..batch {
        for f in 0..features {
            let base = (b * features + f) * spatial;
            for i in base..base + spatial {
                grad_shift[f] += dy[i];
                grad_gamma[f] += dy[i] * xhat[i];
            }
        }
    }

    let mut delta_in = vec![0.0; dy.len()];
    for b in 0..batch {
        for f in 0..features {
            let base = (b * features + f) * spatial;
            let scale = gamma.data()[f] * cache.inv_std[f];
            for i in base..base + spatial {
                delta_in[i] = match cache.mode {
                    Mode::Train => scale * (dy[i] - grad_shift[f] / count - xhat[i] * grad_gamma[f] / count),
                    Mode::Eval => scale * dy[i],
                };
            }
        }
    }
    Ok(BatchNormGrads {
        delta_in: Tensor::new(delta_out.shape().to_vec(), delta_in)?,
        grad_gamma: Tensor::new(vec![features], grad_gamma)?,
        grad_shift: Tensor::new(vec![features], grad_shift)?,
    })
}
