//! Piecewise-approximation (PA) quantization for multiple-binary convolutional
//! networks.
//!
//! The crate is organized around the lifecycle of a PA-quantized network:
//!
//! - [`tensor`]: the dense `f32` tensor substrate and the reference
//!   convolution every other path is checked against.
//! - [`weights`] / [`activations`]: the piecewise quantizers. Weights use
//!   fixed std-scaled endpoints with piece-mean coefficients; activations use
//!   trainable endpoints and coefficients with custom straight-through
//!   gradients.
//! - [`bitops`]: `{0,1}` bit-plane packing and the AND+popcount convolution
//!   engine that evaluates the M x N parallel binary convolutions with merged
//!   scaling coefficients.
//! - [`baselines`]: sign, ternary, fixed-point, and linear-combination
//!   quantizers used for comparison.
//! - [`net`]: desk-scale CNN definition, manual backprop, the PA training
//!   loop, optimizers, checkpointing, and MNIST/CIFAR ingestion.
//! - [`complexity`]: analytic memory, Flops, and latency accounting for
//!   full-precision, single-binary, and PA networks.

pub mod activations;
pub mod baselines;
pub mod bitops;
pub mod complexity;
pub mod error;
pub mod net;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
