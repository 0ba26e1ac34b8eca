//! Reference-aware audiovisual forgery detection on a synthetic world.
//!
//! Everything numeric is generic over the scalar type through [`scalar::Scalar`]
//! (`f32` for training speed, `f64` for gradient checking); the aliases at the
//! crate root fix the precision used by the shipped tools.

pub mod bottleneck;
pub mod container;
pub mod error;
pub mod features;
pub mod fusion;
pub mod gradcheck;
pub mod matching;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};

/// Training-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, used by gradient checks and the data pipeline.
pub type Tensor64 = tensor::Tensor<f64>;
