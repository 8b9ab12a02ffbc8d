//! Layer kinds, their forward/backward passes, and composition into a
//! trainable [`Network`].

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod network;

pub use activation::Activation;
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormGrads, RunningStats, DEFAULT_EPS, DEFAULT_MOMENTUM,
};
pub use conv::{conv2d_backward, conv2d_forward, im2col, ConvCache, ConvGeometry, ConvGrads};
pub use dense::{dense_backward, dense_forward, DenseGrads};
pub use network::{GradientSet, InitScheme, Layer, Network};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Declarative description of one layer, as it appears in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        features: usize,
        #[serde(default = "default_bn_momentum")]
        momentum: f64,
        #[serde(default = "default_bn_eps")]
        eps: f64,
    },
    Activation {
        function: Activation,
    },
    Flatten,
}

fn one() -> usize {
    1
}

fn default_bn_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

fn default_bn_eps() -> f64 {
    DEFAULT_EPS
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn batchnorm(features: usize) -> Self {
        LayerSpec::BatchNorm {
            features,
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn activation(function: Activation) -> Self {
        LayerSpec::Activation { function }
    }

    pub fn relu() -> Self {
        Self::activation(Activation::Relu)
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Activation { .. } => "activation",
            LayerSpec::Flatten => "flatten",
        }
    }
}
