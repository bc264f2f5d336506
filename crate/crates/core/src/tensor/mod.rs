//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! [`Tensor`] is a plain dense value; [`tape::Tape`] records forward ops
//! and propagates cotangents backwards. The engine provides exactly the
//! primitives the model needs, all generic over [`crate::Scalar`].

pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tape;

pub use params::{load_checkpoint, save_checkpoint, CheckpointError, GradTable, ParamId, ParamTable};
pub use tape::{Tape, TensorError, Var};

use crate::scalar::Scalar;
use rand::Rng;

/// Dense n-dimensional value. Most model math is rank 2 (rows x cols);
/// vectors are (1, n) rows and scalars (1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn row(values: &[S]) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn row_from_f64(values: &[f64]) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values.iter().map(|&v| S::from_f64(v)).collect(),
        }
    }

    pub fn matrix_from_f64(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row.iter().map(|&v| S::from_f64(v)));
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    /// Glorot-style uniform init in +-sqrt(6 / (fan_in + fan_out)).
    pub fn glorot_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| S::from_f64(rng.gen_range(-limit..limit)))
            .collect();
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected rank 2, got {:?}", self.shape);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected rank 2, got {:?}", self.shape);
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn is_scalar_shaped(&self) -> bool {
        self.numel() == 1
    }

    pub fn scalar_value(&self) -> S {
        assert!(self.is_scalar_shaped(), "expected scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| Scalar::to_f64(*v)).collect()
    }

    pub fn map_scalar<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(Scalar::to_f64(*v))).collect(),
        }
    }

    pub(crate) fn accumulate(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape, "gradient shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    pub fn scale_in_place(&mut self, s: S) {
        for v in self.data.iter_mut() {
            *v = *v * s;
        }
    }
}
