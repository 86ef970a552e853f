//! Dense tensors and a reverse-mode autodiff tape.
//!
//! Training runs in `f32`; gradient checking instantiates the same graph code
//! in `f64`, so everything downstream is generic over [`Elem`].

mod gemm;
mod nn;
mod tape;

pub mod grad_check;

pub use tape::{Gradients, Tape, TensorId};

use std::fmt;
use std::sync::Arc;

use num_traits::Float;

/// Scalar element type the tape can differentiate through.
pub trait Elem:
    Float + num_traits::NumAssign + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Elem for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn arg_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::InvalidArg {
        op,
        detail: detail.into(),
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Immutable value tensor. Cloning is cheap; the buffer is shared.
#[derive(Clone, Debug)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Elem> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor::new(shape, vec![E::zero(); n])
    }

    pub fn scalar(v: E) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable access for optimizer updates. Copies only if the buffer is
    /// still shared with a live graph, which the training loop avoids by
    /// dropping the tape before stepping.
    pub fn data_mut(&mut self) -> &mut [E] {
        Arc::<Vec<E>>::make_mut(&mut self.data)
    }

    pub(crate) fn arc(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Self {
        Tensor::new(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }
}
