//! Deterministic CPU training for small feed-forward and convolutional
//! classifiers, with interchangeable output heads.
//!
//! An output head decides how logits become outputs and, more importantly,
//! which error delta is pushed into backpropagation. Besides the usual
//! softmax/cross-entropy and squashing/MSE pairings, [`heads`] provides the
//! exponential (`α·eˣ − t`) and cubic (`α·x³ + β − t`) gradient-boosting heads,
//! which use linear outputs but impose an amplified delta.
//!
//! Modules:
//! - [`tensor`]: row-major `f64` tensors with fixed summation order.
//! - [`layers`]: dense, conv2d (im2col), batch norm, activations, [`layers::Network`].
//! - [`heads`]: output heads, target encoding, softmax normalization term.
//! - [`curvature`]: closed-form single-output Hessians and their ordering.
//! - [`datasets`]: MNIST IDX and CIFAR-10 binary readers, synthetic data, batching.
//! - [`diagnostics`]: error curves, RMS traces, delta histograms, CSV output.
//! - [`runner`]: run configs, SGD, training, multi-trial comparison, gradient checks.

// Negated float comparisons are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod curvature;
pub mod datasets;
pub mod diagnostics;
pub mod error;
pub mod heads;
pub mod layers;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
