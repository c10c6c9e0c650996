//! Dense n-dimensional `f64` arrays and the reverse-mode tape built on them.
//!
//! [`Tensor`] is the single runtime value of the evaluator. It is immutable:
//! every operation returns a fresh tensor, and the storage is reference
//! counted so clones are cheap and tensors can be shared between threads.
//!
//! Arithmetic always runs in `f64`. [`Precision`] is a storage hint used by
//! models that want their parameters rounded to single precision.

mod kernels;
mod sparse;
mod tape;
mod vjp;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use kernels::{broadcast_shape, CmpOp};
pub use sparse::{CsrMatrix, LuFactor, Triplets};
pub use tape::{Op, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: isize, rank: usize },
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: isize, extent: usize },
    #[error("data length {got} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, got: usize },
    #[error("gradient output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("unknown tape node {0}")]
    UnknownNode(usize),
    #[error("matrix is singular (pivot {pivot} at column {column})")]
    Singular { column: usize, pivot: f64 },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Storage precision hint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    /// Round a value to the storage precision.
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    precision: Precision,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: impl Into<Vec<f64>>) -> Result<Self> {
        let shape = shape.into();
        let data = data.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                shape,
                got: data.len(),
            });
        }
        Ok(Self::from_parts(shape, data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: data.into(),
            precision: Precision::F64,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn vector(data: impl Into<Vec<f64>>) -> Self {
        let data = data.into();
        Self::from_parts(vec![data.len()], data)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Returns a copy tagged with `precision`, rounding the stored values.
    pub fn with_precision(&self, precision: Precision) -> Tensor {
        let data = match precision {
            Precision::F64 => self.data.clone(),
            Precision::F32 => self.data.iter().map(|&v| precision.round(v)).collect(),
        };
        Tensor {
            shape: self.shape.clone(),
            data,
            precision,
        }
    }

    /// The single value of a tensor with one element.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn strides(&self) -> Vec<usize> {
        kernels::strides(&self.shape)
    }

    /// Element at a multi-index.
    pub fn get(&self, index: &[usize]) -> Result<f64> {
        if index.len() != self.shape.len() {
            return Err(TensorError::InvalidAxis {
                axis: index.len() as isize,
                rank: self.rank(),
            });
        }
        let mut off = 0;
        for ((&i, &n), s) in index.iter().zip(&self.shape).zip(self.strides()) {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    index: i as isize,
                    extent: n,
                });
            }
            off += i * s;
        }
        Ok(self.data[off])
    }

    /// True when both shape and every bit of the data agree.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, o: &Tensor) -> Result<Tensor> {
        kernels::binary(self, o, "add", |a, b| a + b)
    }
    pub fn sub(&self, o: &Tensor) -> Result<Tensor> {
        kernels::binary(self, o, "sub", |a, b| a - b)
    }
    pub fn mul(&self, o: &Tensor) -> Result<Tensor> {
        kernels::binary(self, o, "mul", |a, b| a * b)
    }
    pub fn div(&self, o: &Tensor) -> Result<Tensor> {
        kernels::binary(self, o, "div", |a, b| a / b)
    }
    pub fn pow(&self, o: &Tensor) -> Result<Tensor> {
        kernels::binary(self, o, "pow", f64::powf)
    }
    pub fn maximum(&self, o: &Tensor) -> Result<Tensor> {
        kernels::binary(self, o, "maximum", f64::max)
    }
    pub fn minimum(&self, o: &Tensor) -> Result<Tensor> {
        kernels::binary(self, o, "minimum", f64::min)
    }
    pub fn compare(&self, o: &Tensor, op: CmpOp) -> Result<Tensor> {
        kernels::binary(self, o, "compare", move |a, b| op.apply(a, b))
    }
    pub fn neg(&self) -> Tensor {
        self.map(|v| -v)
    }
    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// Sum over `axes` (all axes when `None`).
    pub fn sum(&self, axes: Option<&[isize]>, keepdim: bool) -> Result<Tensor> {
        let axes = kernels::normalize_axes(axes, self.rank())?;
        Ok(kernels::sum_axes(self, &axes, keepdim))
    }

    pub fn mean(&self, axes: Option<&[isize]>, keepdim: bool) -> Result<Tensor> {
        let ax = kernels::normalize_axes(axes, self.rank())?;
        let count: usize = ax.iter().map(|&a| self.shape[a]).product();
        let s = kernels::sum_axes(self, &ax, keepdim);
        Ok(s.scale(1.0 / count as f64))
    }

    /// Mean of squares over `axes`.
    pub fn mse(&self, axes: Option<&[isize]>) -> Result<Tensor> {
        self.mul(self)?.mean(axes, false)
    }

    pub fn matmul(&self, o: &Tensor) -> Result<Tensor> {
        kernels::matmul(self, o)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        kernels::transpose2(self)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            precision: self.precision,
        })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        kernels::broadcast_to(self, shape)
    }

    pub fn concat(parts: &[&Tensor], axis: isize) -> Result<Tensor> {
        kernels::concat(parts, axis)
    }

    /// Strided range along one axis: `start, start+step, …` (`len` entries).
    pub fn slice(&self, axis: isize, start: usize, len: usize, step: usize) -> Result<Tensor> {
        let axis = kernels::normalize_axis(axis, self.rank())?;
        kernels::slice(self, axis, start, len, step)
    }

    /// Select entries along an axis by index list.
    pub fn select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        kernels::select(self, axis, indices)
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data[..] == other.data[..]
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

/// Shape rendered as `(a,b,c)`.
pub fn shape_string(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("({})", parts.join(","))
}
