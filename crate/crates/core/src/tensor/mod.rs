//! Dense 64-bit arrays with reverse-mode differentiation.
//!
//! A [`Tensor`] owns values (and optionally an accumulated gradient). Operations are
//! recorded on a [`Tape`], which replays them in reverse to compute gradients. Model
//! weights live in a [`ParamStore`] and enter a tape as tracked leaves.

pub mod checkpoint;
pub mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;

use std::fmt;
use std::sync::Arc;

pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero extent")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self::from_parts(shape, Arc::new(data)))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Self {
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), Arc::new(vec![0.0; numel]))
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), Arc::new(vec![value; numel]))
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], Arc::new(vec![value]))
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(vec![n], values)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(vec![m, n], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], Arc::new(data))
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    /// Mutable access to the values; copies them first if another tensor shares the buffer.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::dim(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::dim(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = *self.shape.last().unwrap_or(&1);
        &self.data[i * n..(i + 1) * n]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, s) in index.iter().zip(&self.shape) {
            flat = flat * s + i;
        }
        self.data[flat]
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Keeps rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if start >= end || end > m {
            return Err(Error::dim(format!("row range {start}..{end} of {m} rows")));
        }
        Tensor::new(vec![end - start, n], self.data[start * n..end * n].to_vec())
    }

    /// Right-pads a matrix with zero rows up to `rows`.
    pub fn pad_rows(&self, rows: usize) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if rows < m {
            return Err(Error::dim(format!("cannot pad {m} rows down to {rows}")));
        }
        let mut data = self.data.as_ref().clone();
        data.resize(rows * n, 0.0);
        Tensor::new(vec![rows, n], data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
