//! Dense tensors and the forward/backward kernels every layer is built from.
//!
//! All spatial data uses row-major HWC layout: an image of height `h`, width
//! `w` and `c` channels is a tensor of shape `[h, w, c]` and element
//! `(y, x, ch)` lives at flat index `(y * w + x) * c + ch`.
//!
//! Kernels are pure functions generic over [`Scalar`], so the same code runs in
//! 32-bit (storage and inference precision) and in 64-bit (gradient checking).

mod activation;
mod conv;
mod dense;
mod pool;

pub use activation::{cross_entropy, relu, relu_backward, softmax, CE_CLAMP};
pub use conv::{conv2d_backward, conv2d_backward_accumulate, conv2d_forward, ConvParams};
pub use dense::{dense_backward, dense_backward_accumulate, dense_forward, DenseParams};
pub use pool::{maxpool2_backward, maxpool2_forward, PoolIndex};

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, NumAssign};
use thiserror::Error;

/// Floating-point element type of a [`Tensor`].
pub trait Scalar: Float + NumAssign + Sum + Default + Debug + Send + Sync + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("invalid shape {0:?}: every dimension must be positive")]
    InvalidShape(Vec<usize>),
    #[error("{op}: input {h}x{w} is too small")]
    Degenerate { op: &'static str, h: usize, w: usize },
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("pool index does not match gradient: {0}")]
    StaleIndex(String),
}

pub(crate) fn mismatch(op: &'static str, expected: impl Debug, got: impl Debug) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}

/// Dense n-dimensional array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidShape(shape));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::LengthMismatch { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    /// # Panics
    /// If any dimension is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same data viewed under a new shape with the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest element; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub(crate) fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(mismatch(op, "[h, w, c]", &self.shape)),
        }
    }
}
