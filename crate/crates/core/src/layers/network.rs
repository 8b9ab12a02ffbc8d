use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, dense_backward, dense_forward, Activation,
    BatchNormCache, ConvCache, ConvGeometry, LayerSpec, Mode, RunningStats,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum InitScheme {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    #[default]
    He,
    /// Normal with standard deviation `sqrt(2 / (fan_in + fan_out))`.
    Xavier,
    Uniform {
        low: f64,
        high: f64,
    },
}

#[derive(Clone, Debug)]
enum Cache {
    Dense(Tensor),
    Conv(ConvCache),
    BatchNorm(BatchNormCache),
    Activation(Tensor),
    Flatten(Vec<usize>),
}

/// One layer with its parameters and, after a train-mode forward pass, the
/// state its backward pass needs.
#[derive(Clone, Debug)]
pub struct Layer {
    spec: LayerSpec,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    params: Vec<Tensor>,
    running: Option<RunningStats>,
    cache: Option<Cache>,
}

fn with_batch(batch: usize, shape: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len() + 1);
    s.push(batch);
    s.extend_from_slice(shape);
    s
}

impl Layer {
    /// Validates `spec` against the per-sample `input_shape` and allocates
    /// parameters (weights zero, batch-norm scale one).
    fn build(spec: &LayerSpec, input_shape: &[usize]) -> Result<Self> {
        let mismatch = || {
            Error::dim(format!(
                "{} layer cannot take per-sample input shape {input_shape:?}",
                spec.kind_name()
            ))
        };
        let (output_shape, params, running) = match *spec {
            LayerSpec::Dense { inputs, outputs } => {
                if input_shape != [inputs] || outputs == 0 {
                    return Err(mismatch());
                }
                (
                    vec![outputs],
                    vec![Tensor::zeros(&[inputs, outputs]), Tensor::zeros(&[outputs])],
                    None,
                )
            }
            LayerSpec::Conv2d { .. } => {
                let geometry = conv_geometry(spec);
                let [c, h, w] = input_shape[..] else {
                    return Err(mismatch());
                };
                if c != geometry.in_channels || geometry.out_channels == 0 {
                    return Err(mismatch());
                }
                let (oh, ow) = geometry.output_size(h, w)?;
                (
                    vec![geometry.out_channels, oh, ow],
                    vec![
                        Tensor::zeros(&geometry.kernel_shape()),
                        Tensor::zeros(&[geometry.out_channels]),
                    ],
                    None,
                )
            }
            LayerSpec::BatchNorm {
                features,
                eps,
                momentum,
            } => {
                if !(input_shape.len() == 1 || input_shape.len() == 3) || input_shape[0] != features {
                    return Err(mismatch());
                }
                if !(eps > 0.0) || !(0.0..1.0).contains(&momentum) {
                    return Err(Error::Config(format!(
                        "batchnorm eps {eps} must be > 0 and momentum {momentum} in [0, 1)"
                    )));
                }
                (
                    input_shape.to_vec(),
                    vec![Tensor::full(&[features], 1.0), Tensor::zeros(&[features])],
                    Some(RunningStats::new(features)),
                )
            }
            LayerSpec::Activation { .. } => (input_shape.to_vec(), vec![], None),
            LayerSpec::Flatten => (vec![input_shape.iter().product()], vec![], None),
        };
        Ok(Self {
            spec: spec.clone(),
            input_shape: input_shape.to_vec(),
            output_shape,
            params,
            running,
            cache: None,
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn kind_name(&self) -> &'static str {
        self.spec.kind_name()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn running_stats(&self) -> Option<&RunningStats> {
        self.running.as_ref()
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let batch = x.rows();
        let (out, cache) = match self.spec {
            LayerSpec::Dense { .. } => {
                let y = dense_forward(x, &self.params[0], &self.params[1])?;
                (y, Cache::Dense(x.clone()))
            }
            LayerSpec::Conv2d { .. } => {
                let (y, c) = conv2d_forward(x, &self.params[0], &self.params[1], &conv_geometry(&self.spec))?;
                (y, Cache::Conv(c))
            }
            LayerSpec::BatchNorm { momentum, eps, .. } => {
                let running = self.running.as_mut().expect("batchnorm layer owns running stats");
                let (y, c) = batchnorm_forward(x, &self.params[0], &self.params[1], mode, running, momentum, eps)?;
                (y, Cache::BatchNorm(c))
            }
            LayerSpec::Activation { function } => (function.forward(x), Cache::Activation(x.clone())),
            LayerSpec::Flatten => {
                let shape = x.shape().to_vec();
                let y = x.clone().reshape(with_batch(batch, &self.output_shape))?;
                (y, Cache::Flatten(shape))
            }
        };
        if mode == Mode::Train {
            self.cache = Some(cache);
        }
        Ok(out)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self.spec {
            LayerSpec::Dense { .. } => dense_forward(x, &self.params[0], &self.params[1]),
            LayerSpec::Conv2d { .. } => {
                conv2d_forward(x, &self.params[0], &self.params[1], &conv_geometry(&self.spec)).map(|(y, _)| y)
            }
            LayerSpec::BatchNorm { momentum, eps, .. } => {
                let mut running = self.running.clone().expect("batchnorm layer owns running stats");
                batchnorm_forward(
                    x,
                    &self.params[0],
                    &self.params[1],
                    Mode::Eval,
                    &mut running,
                    momentum,
                    eps,
                )
                .map(|(y, _)| y)
            }
            LayerSpec::Activation { function } => Ok(function.forward(x)),
            LayerSpec::Flatten => x.clone().reshape(with_batch(x.rows(), &self.output_shape)),
        }
    }

    /// Returns the delta with respect to this layer's input and one gradient
    /// per parameter tensor.
    pub fn backward(&self, delta_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State(format!("{} layer has no forward cache", self.kind_name())))?;
        match cache {
            Cache::Dense(x) => {
                let g = dense_backward(x, &self.params[0], delta_out)?;
                Ok((g.delta_in, vec![g.grad_w, g.grad_b]))
            }
            Cache::Conv(c) => {
                let g = conv2d_backward(c, &self.params[0], delta_out)?;
                Ok((g.delta_in, vec![g.grad_kernels, g.grad_bias]))
            }
            Cache::BatchNorm(c) => {
                let g = batchnorm_backward(c, &self.params[0], delta_out)?;
                Ok((g.delta_in, vec![g.grad_gamma, g.grad_shift]))
            }
            Cache::Activation(x) => {
                let LayerSpec::Activation { function } = self.spec else {
                    unreachable!("activation cache on a non-activation layer")
                };
                Ok((function.backward(x, delta_out)?, vec![]))
            }
            Cache::Flatten(shape) => Ok((delta_out.clone().reshape(shape.clone())?, vec![])),
        }
    }

    fn fans(&self) -> Option<(usize, usize)> {
        match self.spec {
            LayerSpec::Dense { inputs, outputs } => Some((inputs, outputs)),
            LayerSpec::Conv2d { .. } => {
                let g = conv_geometry(&self.spec);
                Some((g.fan_in(), g.out_channels * g.kernel * g.kernel))
            }
            _ => None,
        }
    }
}

fn conv_geometry(spec: &LayerSpec) -> ConvGeometry {
    match *spec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => ConvGeometry {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        },
        _ => unreachable!("not a conv2d spec"),
    }
}

/// Parameter gradients (one per parameter tensor, same shapes) and the delta
/// with respect to each layer's input.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub params: Vec<Vec<Tensor>>,
    pub input_deltas: Vec<Tensor>,
}

impl GradientSet {
    pub fn is_congruent(&self, net: &Network) -> bool {
        self.params.len() == net.layers.len()
            && self.params.iter().zip(&net.layers).all(|(gs, layer)| {
                gs.len() == layer.params.len() && gs.iter().zip(&layer.params).all(|(g, p)| g.shape() == p.shape())
            })
    }

    pub fn iter_params(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().flatten()
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl Network {
    /// Builds the layer stack for per-sample inputs of `input_shape`, checking
    /// that each layer accepts the previous layer's output shape.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec]) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape.to_vec();
        for (i, spec) in specs.iter().enumerate() {
            let layer = Layer::build(spec, &shape).map_err(|e| match e {
                Error::Dimension(msg) => Error::Dimension(format!("layer {i}: {msg}")),
                other => other,
            })?;
            shape = layer.output_shape.clone();
            layers.push(layer);
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers.last().expect("non-empty").output_shape()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().flat_map(|l| &l.params).map(Tensor::len).sum()
    }

    pub fn has_cache(&self) -> bool {
        self.layers.iter().all(Layer::has_cache)
    }

    pub fn clear_cache(&mut self) {
        for layer in &mut self.layers {
            layer.cache = None;
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "network expects batch×{:?} input, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Pre-head logits. Train mode caches per-layer state and updates
    /// batch-norm running statistics; eval mode leaves the network untouched.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Eval {
            return self.infer(x);
        }
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, mode)?;
        }
        Ok(h)
    }

    /// Eval-mode forward pass.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    /// Chain rule from the output delta back to the input, last layer first.
    pub fn backward(&self, delta: &Tensor) -> Result<GradientSet> {
        let n = self.layers.len();
        let mut params = vec![Vec::new(); n];
        let mut input_deltas = vec![None; n];
        let mut d = delta.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (delta_in, grads) = layer.backward(&d)?;
            params[i] = grads;
            input_deltas[i] = Some(delta_in.clone());
            d = delta_in;
        }
        Ok(GradientSet {
            params,
            input_deltas: input_deltas.into_iter().map(|d| d.expect("filled")).collect(),
        })
    }

    /// Deterministic re-initialization: weights from `scheme`, biases and
    /// batch-norm shifts zero, batch-norm scales one, running stats reset.
    pub fn init_parameters(&mut self, scheme: InitScheme, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            if let Some(running) = layer.running.as_mut() {
                *running = RunningStats::new(running.mean.len());
                layer.params[0].data_mut().fill(1.0);
                layer.params[1].data_mut().fill(0.0);
                continue;
            }
            let Some((fan_in, fan_out)) = layer.fans() else {
                continue;
            };
            let weights = layer.params[0].data_mut();
            match scheme {
                InitScheme::He | InitScheme::Xavier => {
                    let std = match scheme {
                        InitScheme::He => (2.0 / fan_in as f64).sqrt(),
                        _ => (2.0 / (fan_in + fan_out) as f64).sqrt(),
                    };
                    let normal = Normal::new(0.0, std).expect("finite std");
                    for w in weights.iter_mut() {
                        *w = normal.sample(&mut rng);
                    }
                }
                InitScheme::Uniform { low, high } => {
                    for w in weights.iter_mut() {
                        *w = if high > low { rng.random_range(low..high) } else { low };
                    }
                }
            }
            layer.params[1].data_mut().fill(0.0);
        }
        self.clear_cache();
    }

    /// Layer `i`'s activation function, if it is an activation layer.
    pub fn activation(&self, i: usize) -> Option<Activation> {
        match self.layers[i].spec {
            LayerSpec::Activation { function } => Some(function),
            _ => None,
        }
    }
}
