//! Scalar abstraction over the model's floating-point precision.
//!
//! All geometry and scene data stay in `f64`; the tensor engine, model,
//! and optimizer are generic over [`Scalar`] so the same code runs in
//! 32-bit training mode and 64-bit verification mode.

use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable by the tensor engine: f32 or f64.
pub trait Scalar: Float + Sum + Debug + Display + Default + Send + Sync + 'static {
    /// Bit width, used in logs and artifact metadata.
    const BITS: u32;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const BITS: u32 = 32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Runtime-selectable precision, parsed from configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Default for Precision {
    fn default() -> Self {
        Precision::F32
    }
}
