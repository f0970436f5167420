//! Dense row-major f64 matrix with optional gradient storage.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// A dense `rows x cols` matrix of f64 values, row-major.
///
/// All stored values are finite; constructors reject NaN and infinities.
/// `grad`, when present, always has the same shape as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor from row-major data. Rejects non-finite entries and
    /// length mismatches.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "tensor-new",
                format!("data length {} != {}x{}", data.len(), rows, cols),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor-new" });
        }
        Ok(Tensor {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    /// Constant-valued tensor; `value` must be finite.
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite, got {value}");
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    /// Identity matrix of side `k`.
    pub fn identity(k: usize) -> Self {
        let mut t = Tensor::zeros(k, k);
        for i in 0..k {
            t.data[i * k + i] = 1.0;
        }
        t
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Result<Self> {
        Tensor::new(values.len(), 1, values.to_vec())
    }

    /// Row vector from a slice.
    pub fn row(values: &[f64]) -> Result<Self> {
        Tensor::new(1, values.len(), values.to_vec())
    }

    /// Standard-normal entries drawn from `rng`.
    pub fn randn<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Tensor {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform entries on `[-limit, limit]`.
    pub fn rand_uniform<R: Rng>(rows: usize, cols: usize, limit: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Tensor {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks this tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Installs a gradient buffer; must match the tensor shape.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::dim(
                "set-grad",
                format!("grad length {} != data length {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Gathers the given rows into a new tensor, in the order given.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            if r >= self.rows {
                return Err(Error::dim(
                    "gather-rows",
                    format!("row index {r} out of bounds for {} rows", self.rows),
                ));
            }
            data.extend_from_slice(self.row_slice(r));
        }
        Tensor::new(rows.len(), self.cols, data)
    }

    /// Mean of squared entries; zero for an empty tensor.
    pub fn mean_square(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
