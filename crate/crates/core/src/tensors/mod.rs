//! Dense rank-2 `f32` tensors and the named-tensor container file.
//!
//! Every tensor is a matrix. Vectors are stored as `m x 1` and scalars as
//! `1 x 1`, so row and column factors are defined for every parameter.

mod file;

pub use file::{file_load, file_save, DType, FormatError, NamedTensorFile, TensorEntry, FORMAT_VERSION, MAGIC};

use crate::error::{Error, Result};

/// A dense row-major matrix of finite `f32` values.
#[derive(Clone, PartialEq)]
pub struct ParamTensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for ParamTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamTensor")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("len", &self.data.len())
            .finish()
    }
}

fn checked_len(rows: usize, cols: usize) -> Result<usize> {
    rows.checked_mul(cols)
        .filter(|n| n.checked_mul(std::mem::size_of::<f32>()).is_some())
        .ok_or(Error::SizeOverflow { rows, cols })
}

fn first_non_finite(data: &[f32]) -> Option<usize> {
    data.iter().position(|x| !x.is_finite())
}

impl ParamTensor {
    /// Creates an `rows x cols` tensor with every element set to `fill`.
    pub fn new(rows: usize, cols: usize, fill: f32) -> Result<Self> {
        let len = checked_len(rows, cols)?;
        if !fill.is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
        Ok(Self {
            rows,
            cols,
            data: vec![fill; len],
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, 0.0)
    }

    /// Wraps a row-major buffer, rejecting wrong lengths and NaN/Inf.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let len = checked_len(rows, cols)?;
        if data.len() != len {
            return Err(Error::LengthMismatch {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(index) = first_non_finite(&data) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    /// A column vector (`len x 1`).
    pub fn vector(data: Vec<f32>) -> Result<Self> {
        let n = data.len();
        Self::from_vec(n, 1, data)
    }

    pub fn scalar(value: f32) -> Result<Self> {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access for update operations. Callers must keep values finite;
    /// [`ParamTensor::check_finite`] flags violations.
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn check_finite(&self) -> Result<()> {
        match first_non_finite(&self.data) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn ensure_shape(&self, shape: (usize, usize)) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: self.shape(),
            });
        }
        Ok(())
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    /// Bitwise equality of shape and payload (distinguishes `0.0` from `-0.0`).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn to_entry(&self) -> TensorEntry {
        TensorEntry::from_f32(vec![self.rows, self.cols], &self.data)
    }

    /// Reads a rank-1 or rank-2 `F32` entry. Rank-1 entries become column vectors.
    pub fn from_entry(entry: &TensorEntry) -> Result<Self> {
        let (rows, cols) = match entry.shape() {
            [n] => (*n, 1),
            [m, n] => (*m, *n),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "expected a rank-1 or rank-2 tensor, got shape {other:?}"
                )))
            }
        };
        Self::from_vec(rows, cols, entry.to_f32()?)
    }
}

/// Shorthand for `ParamTensor::new`.
pub fn tensor_new(rows: usize, cols: usize, fill: f32) -> Result<ParamTensor> {
    ParamTensor::new(rows, cols, fill)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_fill() {
        let t = tensor_new(2, 3, 0.0).unwrap();
        assert_eq!(t.shape(), (2, 3));
        assert!(t.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scalar_case() {
        let t = tensor_new(1, 1, 5.0).unwrap();
        assert_eq!(t.as_slice(), &[5.0]);
    }

    #[test]
    fn million_ones_sum() {
        let t = tensor_new(1000, 1000, 1.0).unwrap();
        // Summation oracle: counting the elements.
        let oracle = t.as_slice().iter().filter(|&&x| x == 1.0).count() as f64;
        assert_eq!(t.sum(), oracle);
        assert_eq!(t.sum(), 1.0e6);
    }

    #[test]
    fn size_overflow_is_rejected() {
        assert!(matches!(
            tensor_new(usize::MAX, 2, 0.0),
            Err(Error::SizeOverflow { .. })
        ));
    }

    #[test]
    fn empty_shapes_are_allowed() {
        let t = tensor_new(0, 7, 1.0).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            ParamTensor::from_vec(1, 2, vec![1.0, f32::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(tensor_new(1, 1, f32::INFINITY).is_err());
        let mut t = tensor_new(2, 2, 0.0).unwrap();
        t.as_mut_slice()[3] = f32::NEG_INFINITY;
        assert!(matches!(t.check_finite(), Err(Error::NonFinite { index: 3 })));
    }

    #[test]
    fn length_must_match_shape() {
        assert!(matches!(
            ParamTensor::from_vec(2, 2, vec![0.0; 3]),
            Err(Error::LengthMismatch { .. })
        ));
    }
}
