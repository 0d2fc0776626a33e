//! Dense row-major f32 tensors.
//!
//! Tensors are immutable once constructed; cloning is cheap (shared storage).
//! Every public constructor and op checks that the result is finite — NaN/Inf
//! is reported as an error instead of propagating silently.

use std::sync::Arc;

use crate::error::{NnError, Result};

/// Dense row-major tensor of 32-bit floats.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f32]>,
}

impl Tensor {
    /// Build a tensor from raw data, validating length and finiteness.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NnError::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} implies {} elems, got {}", shape, numel, data.len()),
            });
        }
        check_finite("from_vec", &data)?;
        Ok(Self { shape, data: data.into() })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape, data: vec![0.0; numel].into() }
    }

    /// Tensor filled with a constant.
    pub fn full(shape: Vec<usize>, value: f32) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![value; numel])
    }

    /// Rank-0-style scalar carrier (shape `[1]`).
    pub fn scalar(value: f32) -> Result<Self> {
        Self::from_vec(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(NnError::ShapeMismatch {
                op: "item",
                detail: format!("expected 1 element, got shape {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// Number of rows when viewed as a 2-D matrix `[rows, cols]`.
    pub fn rows(&self) -> Result<usize> {
        self.dims2().map(|(r, _)| r)
    }

    /// Interpret as 2-D, erroring otherwise.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(NnError::ShapeMismatch {
                op: "dims2",
                detail: format!("expected rank 2, got {other:?}"),
            }),
        }
    }

    /// Interpret as 3-D, erroring otherwise.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [a, b, c] => Ok((*a, *b, *c)),
            other => Err(NnError::ShapeMismatch {
                op: "dims3",
                detail: format!("expected rank 3, got {other:?}"),
            }),
        }
    }

    /// Same storage under a new shape (element count must match).
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(NnError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data) })
    }

    /// Exact bitwise equality (shapes and every element).
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f32> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max),
        )
    }
}

pub(crate) fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    for (index, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(NnError::NonFinite { op, index });
        }
    }
    Ok(())
}
