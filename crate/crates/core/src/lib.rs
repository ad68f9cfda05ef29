//! TFormer: a hierarchical vision backbone whose token mixer is a bank of
//! non-learnable poolings plus a pointwise convolution, and whose feedforward
//! network uses grouped projections with a channel shuffle in between.
//!
//! The crate contains everything needed to build, cost, train, and ship the
//! model on a single CPU:
//!
//! * [`tensor`] — a minimal dense NCHW tensor with hand-written forward
//!   kernels and per-operation vector-Jacobian products,
//! * [`layers`] — channel partitioning, the non-learnable module, the hybrid
//!   layer, channel shuffle, the PCS-FFN, patch embedding, and the residual
//!   block,
//! * [`model`] — the S/M/L presets plus a Micro variant for desk-scale tests,
//! * [`cost`] — closed-form parameter/multiply-add accounting with an
//!   attention baseline for comparison,
//! * [`train`] — a synthetic dataset, cross-entropy, SGD with momentum, and a
//!   finite-difference gradient checker,
//! * [`archive`] — the `.tfwa` binary weight container with CRC-32 integrity
//!   and a transmission-payload report.
//!
//! All numeric code is generic over [`Scalar`] so the same kernels run in f32
//! (the deployment dtype) and f64 (oracles and gradient checks).

pub mod archive;
pub mod cost;
pub mod error;
pub mod layers;
pub mod meter;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

/// Single-precision tensor, the default compute dtype.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used by oracles and gradient checks.
pub type Tensor64 = Tensor<f64>;

/// Single-precision model.
pub type Model32 = model::TFormerModel<f32>;
/// Double-precision model.
pub type Model64 = model::TFormerModel<f64>;
