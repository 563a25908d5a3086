//! Dense row-major `f64` tensors and the handful of kernels the models need.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// A dense, row-major tensor of doubles.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("tensor shape {shape:?} must have positive dimensions")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "bad shape {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a `rows × cols` matrix from a function of `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    /// Number of rows when viewed as a matrix (leading dimension).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Number of columns when viewed as a matrix (product of trailing dimensions).
    pub fn cols(&self) -> usize {
        if self.shape.len() == 1 {
            self.shape[0]
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let cols = self.cols();
        self.data[row * cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let cols = self.cols();
        &self.data[row * cols..(row + 1) * cols]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// Named tensors, iterated in name order.
pub type ParamSet = BTreeMap<String, Tensor>;

/// Plain gradient descent: every parameter becomes `p - lr * g`.
pub fn sgd_step(params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() {
        return Err(Error::invalid(format!(
            "sgd_step: {} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (name, grad) in grads {
        let param = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("sgd_step: gradient for unknown parameter `{name}`")))?;
        if param.shape() != grad.shape() {
            return Err(Error::invalid(format!(
                "sgd_step: parameter `{name}` has shape {:?}, gradient {:?}",
                param.shape(),
                grad.shape()
            )));
        }
    }
    for (name, grad) in grads {
        let param = params.get_mut(name).expect("checked above");
        for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
            *p -= lr * g;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Kernels shared by the graph and the direct (graph-free) code paths.

/// `c (m×n) = a (m×k) · b (k×n)`, with optional transposition of either input.
///
/// `a_t` means `a` is stored as `k×m`; `b_t` means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the buffers whose lengths are
    // asserted, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(Error::invalid(format!(
            "matmul: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::matrix(m, n, out)
}

/// Layer normalization of one vector with population variance.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    assert!(x.len() == gain.len() && x.len() == bias.len() && !x.is_empty());
    let mut out = vec![0.0; x.len()];
    layer_norm_row(x, gain, bias, eps, &mut out);
    out
}

/// Writes the normalized row into `out` and returns `1/sqrt(var + eps)`.
pub(crate) fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    for (j, o) in out.iter_mut().enumerate() {
        *o = gain[j] * (x[j] - mean) * inv_std + bias[j];
    }
    inv_std
}

/// Row-wise softmax over the visible (unmasked) columns of a square matrix.
///
/// `mask[i * w + j] == true` blocks column `j` for row `i`; blocked entries
/// come out exactly zero. A row with no visible column is rejected.
pub fn masked_softmax(logits: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let (rows, cols) = (logits.rows(), logits.cols());
    if mask.len() != rows * cols {
        return Err(Error::invalid(format!(
            "masked_softmax: mask has {} entries for a {rows}×{cols} matrix",
            mask.len()
        )));
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let range = i * cols..(i + 1) * cols;
        if !softmax_row(&logits.data()[range.clone()], &mask[range.clone()], &mut out[range]) {
            return Err(Error::invalid(format!("masked_softmax: row {i} is fully masked")));
        }
    }
    Tensor::matrix(rows, cols, out)
}

/// Returns `false` when every column of the row is blocked.
pub(crate) fn softmax_row(logits: &[f64], blocked: &[bool], out: &mut [f64]) -> bool {
    let max = logits
        .iter()
        .zip(blocked)
        .filter(|(_, &b)| !b)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut total = 0.0;
    for ((o, &v), &b) in out.iter_mut().zip(logits).zip(blocked) {
        *o = if b { 0.0 } else { (v - max).exp() };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    true
}
