//! Heterogeneous driving-graph scene encoder and multi-modal trajectory
//! predictor, with a synthetic scene generator, a minimal tape-based
//! autodiff engine, a training harness, and forecasting metrics.
//!
//! Numeric code is generic over the scalar type ([`scalar::Scalar`]);
//! concrete f32/f64 aliases live at the crate root. Geometry, scene
//! data, and graph construction are always f64.

pub mod decoder;
pub mod encoders;
pub mod geometry;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod scene;
pub mod tensor;
pub mod train;
pub mod verify;

pub use scalar::{Precision, Scalar};

/// Concrete model aliases for the two supported precisions.
pub type ModelF32 = model::Model<f32>;
pub type ModelF64 = model::Model<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;
