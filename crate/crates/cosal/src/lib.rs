//! Group-collaborative co-salient object detection, desk scale.
//!
//! The numeric core (tensors, autodiff, model, losses) is generic over the
//! scalar type: `f32` for training, `f64` for gradient verification.

pub mod checkpoint;
pub mod collab;
pub mod data;
pub mod engine;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{CosalError, Result};
pub use scalar::Scalar;
pub use tape::{grad_check, GradCheckReport, Gradients, Tape, ValueId};
pub use tensor::Tensor;

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
