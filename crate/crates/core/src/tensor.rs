//! Dense row-major `f64` tensors and the order statistics used by the
//! calibration and outlier-loss code.

use crate::error::{QtError, Result};
use crate::stats::{self, Moments};

/// Dense row-major array. Every extent is positive and every value finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, rejecting zero extents, length mismatches and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel = checked_numel(&shape)?;
        if numel != data.len() {
            return Err(QtError::dim(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(QtError::data(format!("non-finite value at index {i}")));
        }
        Ok(Tensor { shape, data })
    }

    /// Construct without validation. Callers guarantee the shape matches.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    /// 1-D tensor from a vector.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(QtError::dim("ragged rows"));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(QtError::dim(format!("expected a 2-D tensor, got {:?}", self.shape))),
        }
    }

    /// Same data, new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = checked_numel(shape)?;
        if n != self.data.len() {
            return Err(QtError::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Elementwise map; the closure must keep values finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Mutable access for in-place updates. The caller must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Contiguous block of rows `[start, end)` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let rows = self.shape[0];
        if start >= end || end > rows {
            return Err(QtError::dim(format!("row range {start}..{end} out of 0..{rows}")));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor::from_parts(
            shape,
            self.data[start * inner..end * inner].to_vec(),
        ))
    }

    pub fn max_abs(&self) -> Result<f64> {
        stats::argmax_abs(&self.data)
            .map(|(_, v)| v)
            .ok_or_else(|| QtError::domain("max_abs of an empty tensor"))
    }

    /// Median of `|x|`; the mean of the two central order statistics for even length.
    pub fn median_abs(&self) -> Result<f64> {
        stats::abs_quantile(&self.data, 0.5)
            .map(|q| q.value)
            .ok_or_else(|| QtError::domain("median_abs of an empty tensor"))
    }

    /// Population standard deviation of the signed values.
    pub fn stddev(&self) -> Result<f64> {
        if self.data.len() < 2 {
            return Err(QtError::domain("stddev needs at least two elements"));
        }
        Ok(Moments::from_slice(&self.data).std())
    }

    /// Quantile `p` of `|x|` by linear interpolation between closest ranks.
    pub fn percentile(&self, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(QtError::domain(format!("percentile fraction {p} outside [0, 1]")));
        }
        stats::abs_quantile(&self.data, p)
            .map(|q| q.value)
            .ok_or_else(|| QtError::domain("percentile of an empty tensor"))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(QtError::dim("shape must have at least one extent"));
    }
    if shape.contains(&0) {
        return Err(QtError::dim(format!("zero extent in shape {shape:?}")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| QtError::dim(format!("shape {shape:?} overflows")))
}
