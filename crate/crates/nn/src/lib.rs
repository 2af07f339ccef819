//! Reverse-mode automatic differentiation over dense 5-D tensors and the
//! configurable 3D UNet built on top of it.
//!
//! Every tensor is laid out as `(N, C, D, H, W)` with `W` fastest, which
//! matches the x-fastest ordering of scalar volumes. All operations are
//! generic over [`Scalar`] so the same code runs in `f32` for training and
//! in `f64` for finite-difference gradient checks.

pub mod adam;
mod error;
pub mod gradcheck;
mod kernels;
mod loss;
mod ops;
mod scalar;
mod tape;
mod tensor;
pub mod unet;

pub use adam::{AdamConfig, AdamState};
pub use error::{NnError, Result};
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
pub use scalar::Scalar;
pub use loss::{CombinedLoss, LabelLoss, BCE_CLAMP};
pub use tape::{Tape, Var};
pub use tensor::Tensor5;
pub use unet::{HeadLabel, UNetConfig, UNetModel};
