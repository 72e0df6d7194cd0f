//! Minimal reverse-mode automatic differentiation engine.
//!
//! Values are recorded on an eager tape ([`Graph`]). Every operation computes
//! its forward result immediately and appends a node; [`Graph::backward`]
//! walks the tape in reverse insertion order, which is a valid reverse
//! topological order by construction. All arithmetic is 64-bit.

mod adam;
mod gemm;
mod gradcheck;
mod graph;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{gradcheck, random_tensor, GradcheckCase, GradcheckReport, GRADCHECK_EPS, GRADCHECK_TOL};
pub use graph::{BnMode, BnStats, FdHealth, Graph, TensorId, BN_EPS, BN_MOMENTUM};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op} expects rank {expected}, got shape {shape:?}")]
    BadRank { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("axis {axis} out of range for shape {shape:?}")]
    BadAxis { axis: usize, shape: Vec<usize> },
    #[error("avgpool2d requires even spatial extents, got {h}x{w}")]
    OddPoolExtent { h: usize, w: usize },
    #[error("backward already run on this graph")]
    BackwardTwice,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("bce_loss target must be exactly 0 or 1, found {value} at index {index}")]
    TargetNotBinary { value: f64, index: usize },
    #[error("batchnorm eval mode: uninitialized running statistics")]
    UninitializedStats,
    #[error("batchnorm train mode needs at least 2 samples per channel, got {count}")]
    TooFewBatchSamples { count: usize },
    #[error("gwrp decay must lie in [0, 1], got {decay}")]
    DecayOutOfRange { decay: f64 },
    #[error("non-finite values in {what}")]
    NonFinite { what: String },
    #[error("nan gradient for parameter {name}")]
    NanGrad { name: String },
}

/// Dense n-dimensional array, row-major, 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, AutogradError> {
        if numel(shape) != data.len() {
            return Err(AutogradError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} implies {} elements, got {}", shape, numel(shape), data.len()),
            });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; numel(shape)] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_has_single_element() {
        let t = Tensor::scalar(4.25);
        assert_eq!(t.shape(), &[1]);
        assert_eq!(t.data(), &[4.25]);
    }
}
