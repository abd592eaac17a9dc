//! Retinal vessel and optic disc segmentation with a five-stage CNN trunk
//! and task-specialized side layers, built and trained entirely on the CPU.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod net;
pub mod ops;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Storage-precision tensor used by the network itself.
pub type Tensor32 = tensor::Tensor<f32>;
/// Accumulation-precision tensor used by oracles and gradient checks.
pub type Tensor64 = tensor::Tensor<f64>;
