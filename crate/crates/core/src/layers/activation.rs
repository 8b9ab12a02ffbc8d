use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{sigmoid, Tensor, UnaryOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    pub fn op(self) -> UnaryOp {
        match self {
            Activation::Relu => UnaryOp::Relu,
            Activation::Sigmoid => UnaryOp::Sigmoid,
            Activation::Tanh => UnaryOp::Tanh,
            Activation::Identity => UnaryOp::Identity,
        }
    }

    /// Derivative at pre-activation `x`. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn forward(self, x: &Tensor) -> Tensor {
        x.map_unary(self.op())
    }

    /// `delta_in = delta_out ⊙ f'(x)` for the cached pre-activation `x`.
    pub fn backward(self, x: &Tensor, delta_out: &Tensor) -> Result<Tensor> {
        delta_out.zip_map(x, |d, v| d * self.derivative(v))
    }
}
