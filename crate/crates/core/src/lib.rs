//! Needle-tip tracking with selective state-space cross-correlation.
//!
//! The crate is organized bottom-up:
//!
//! * [`autograd`], [`tensor`]: dense tensors and a tape for reverse-mode gradients.
//! * [`ssm`]: zero-order-hold discretization, selective parameters, the
//!   recurrent scan and its convolution-kernel form.
//! * [`xcorr`]: window unfold/fold, cross-map interleaved scan layouts and
//!   both cross-correlation operators.
//! * [`motion`]: bounding boxes and the FIFO motion queue.
//! * [`net`]: the tracker network, its loss, decoding and checkpoints.
//! * [`harness`]: synthetic data, metrics, training, evaluation and ablations.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the training and evaluation drivers.

pub mod autograd;
pub mod error;
pub mod harness;
mod kernels;
pub mod motion;
pub mod net;
pub mod scalar;
pub mod ssm;
pub mod tensor;
pub mod xcorr;

pub use autograd::{grad_check, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use kernels::Pad2d;
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Working precision of the drivers.
pub type Float = f64;
pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
