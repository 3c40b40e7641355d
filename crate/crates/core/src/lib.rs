//! Dual-encoder fusion U-Net for binary segmentation, built on a small
//! self-contained tensor and reverse-mode autodiff engine.
//!
//! Layout of the crate:
//!
//! - [`tensor`]: NCHW tensors and forward kernels (convolution with stride
//!   and per-axis dilation, pooling, upsampling, batch norm, activations).
//! - [`autodiff`]: the recording tape, backward rules and gradient checking.
//! - [`nn`]: parameter store, layers, and the recurrent, densely connected
//!   and dilated-inception blocks.
//! - [`model`]: the dual-encoder network, a plain U-Net baseline and
//!   checkpoint files.
//! - [`metrics`], [`optim`], [`data`]: loss and evaluation, optimizer and
//!   schedules, dataset preparation.
//! - [`train`]: the mini-batch training loop.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Shape, Tensor};
