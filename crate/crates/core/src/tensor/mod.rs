//! Dense tensor algebra with reverse-mode automatic differentiation.
//!
//! Everything in the model is expressed over [`DenseTensor`] values recorded
//! on a [`Tape`]. The tape is a Wengert list: ops are evaluated eagerly during
//! the forward pass and replayed in reverse to accumulate exact gradients.
//! All arithmetic is in `f64`.

mod grad_check;
mod tape;

pub use grad_check::grad_check;
pub use tape::{BinaryKind, Gradients, ReduceKind, Tape, TensorId, UnaryKind};

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a rank-2 tensor, got shape {shape:?}")]
    NotRank2 { op: &'static str, shape: Vec<usize> },
    #[error("data length {got} does not match shape {shape:?} (expects {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape {shape:?} contains a zero dimension")]
    ZeroDim { shape: Vec<usize> },
    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },
    #[error("reduction over axis {axis} has an empty effective slice (index {slice})")]
    DegenerateAxis { axis: usize, slice: usize },
    #[error("axis {axis} is out of range for rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("index {index} out of range for table of {size} rows")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("parameter {name:?} registered twice on the same tape")]
    DuplicateParam { name: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Shape-tagged row-major array of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim { shape });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(DenseTensor { shape, data })
    }

    /// Rank-2 zero tensor.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseTensor {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    /// 1×n row vector.
    pub fn row(values: &[f64]) -> Self {
        DenseTensor {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    /// 1×1 scalar.
    pub fn scalar(value: f64) -> Self {
        DenseTensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Rank-2 tensor from row slices; all rows must have equal length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.is_empty() || cols == 0 {
            return Err(TensorError::ZeroDim {
                shape: vec![rows.len(), cols],
            });
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![1, cols],
                    rhs: vec![1, r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(DenseTensor {
            shape: vec![rows.len(), cols],
            data,
        })
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::NotRank2 {
                op: "dims2",
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn get2(&self, row: usize, col: usize) -> f64 {
        let cols = self.shape[1];
        self.data[row * cols + col]
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NonScalarLoss {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Max absolute entry (∞-norm).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Boolean mask aligned with a tensor shape. Masks are never differentiated.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Mask { shape, data })
    }

    pub fn all_true(rows: usize, cols: usize) -> Self {
        Mask {
            shape: vec![rows, cols],
            data: vec![true; rows * cols],
        }
    }

    pub fn row(values: &[bool]) -> Self {
        Mask {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get2(&self, row: usize, col: usize) -> bool {
        self.data[row * self.shape[1] + col]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        let err = DenseTensor::new(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { expected: 6, got: 5, .. }));
    }

    #[test]
    fn new_rejects_zero_dim() {
        let err = DenseTensor::new(vec![2, 0], vec![]).unwrap_err();
        assert!(matches!(err, TensorError::ZeroDim { .. }));
    }

    #[test]
    fn row_and_scalar_shapes() {
        assert_eq!(DenseTensor::row(&[1.0, 2.0]).shape(), &[1, 2]);
        assert_eq!(DenseTensor::scalar(3.0).shape(), &[1, 1]);
        assert_eq!(DenseTensor::scalar(3.0).item().unwrap(), 3.0);
    }

    #[test]
    fn from_rows_checks_widths() {
        let t = DenseTensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(t.get2(1, 0), 3.0);
        assert!(DenseTensor::from_rows(&[&[1.0], &[1.0, 2.0]]).is_err());
    }
}
