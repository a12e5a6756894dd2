//! Dense 2-D `f64` tensor with the handful of kernels the model needs.
//!
//! Everything is row-major and owned. Vectors are 1×n or n×1 tensors,
//! scalars are 1×1. Matrix products route through `matrixmultiply::dgemm`,
//! with transposes expressed via strides so they are never materialized.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Which operands of a product are logically transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatMul {
    /// a (n×k) · b (k×m)
    NN,
    /// a (n×k) · bᵀ (m×k)
    NT,
    /// aᵀ (k×n) · b (k×m)
    TN,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape/data mismatch");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(1, 1, vec![v])
    }

    /// Uniform init in [-a, a] with a = sqrt(6 / (fan_in + fan_out)).
    pub fn kaiming_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        Tensor { rows, cols, data }
    }

    /// Gaussian init with the given standard deviation (Box-Muller).
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = rows * cols;
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let t = 2.0 * std::f64::consts::PI * u2;
            data.push(r * t.cos() * std);
            if data.len() < n {
                data.push(r * t.sin() * std);
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the buffer with a new shape of the same element count.
    pub fn reshape(&self, rows: usize, cols: usize) -> Tensor {
        assert_eq!(rows * cols, self.data.len(), "reshape size mismatch");
        Tensor {
            rows,
            cols,
            data: self.data.clone(),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_scaled_assign(&mut self, other: &Tensor, s: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Add a 1×cols row vector to every row.
    pub fn add_row(&self, row: &Tensor) -> Tensor {
        assert_eq!(row.rows, 1, "bias must be a row vector");
        assert_eq!(row.cols, self.cols, "bias width mismatch");
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[r * self.cols + c] += row.data[c];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data.iter().map(|v| v * s).collect();
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data.iter().map(|v| v.max(0.0)).collect();
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        assert!(start <= end && end <= self.cols, "column slice out of range");
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            data.extend_from_slice(&self.data[r * self.cols + start..r * self.cols + end]);
        }
        Tensor {
            rows: self.rows,
            cols: w,
            data,
        }
    }

    pub fn gather_rows(&self, ids: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(ids.len() * self.cols);
        for &id in ids {
            assert!(id < self.rows, "row index out of range");
            data.extend_from_slice(self.row(id));
        }
        Tensor {
            rows: ids.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let rows = parts[0].rows;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                assert_eq!(p.rows, rows, "concat_cols row mismatch");
                data.extend_from_slice(p.row(r));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let cols = parts[0].cols;
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            assert_eq!(p.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&p.data);
        }
        Tensor { rows, cols, data }
    }

    /// out = self · other under the given transpose mode.
    pub fn matmul(&self, other: &Tensor, mode: MatMul) -> Tensor {
        let (m, k, n, rsa, csa, rsb, csb) = match mode {
            MatMul::NN => {
                assert_eq!(self.cols, other.rows, "matmul NN inner dim");
                (
                    self.rows,
                    self.cols,
                    other.cols,
                    self.cols as isize,
                    1,
                    other.cols as isize,
                    1,
                )
            }
            MatMul::NT => {
                assert_eq!(self.cols, other.cols, "matmul NT inner dim");
                (
                    self.rows,
                    self.cols,
                    other.rows,
                    self.cols as isize,
                    1,
                    1,
                    other.cols as isize,
                )
            }
            MatMul::TN => {
                assert_eq!(self.rows, other.rows, "matmul TN inner dim");
                (
                    self.cols,
                    self.rows,
                    other.cols,
                    1,
                    self.cols as isize,
                    other.cols as isize,
                    1,
                )
            }
        };
        let mut out = Tensor::zeros(m, n);
        if m == 0 || n == 0 || k == 0 {
            return out;
        }
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                rsa,
                csa,
                other.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    /// Accumulate self += a · b under the given mode (used by backward passes).
    pub fn matmul_acc(&mut self, a: &Tensor, b: &Tensor, mode: MatMul) {
        let prod = a.matmul(b, mode);
        self.add_assign(&prod);
    }

    /// Row-wise L2 normalization; zero rows stay zero.
    pub fn normalize_rows(&self) -> Tensor {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        out
    }

    /// Row-wise log-softmax, stabilized by the row max.
    pub fn log_softmax_rows(&self) -> Tensor {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        out
    }

    /// Frobenius norm of the difference, relative to the norm of `self`.
    pub fn rel_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            num += (a - b) * (a - b);
            den += a * a;
        }
        if den == 0.0 {
            return num.sqrt();
        }
        (num / den).sqrt()
    }
}

/// Causal row softmax for attention scores: entry (i, j) participates only
/// when j ≤ i + offset; masked entries come out as exactly 0.
/// `offset` supports score blocks whose rows start later than column 0
/// (not needed for full square scores, where it is 0).
pub fn causal_softmax(scores: &Tensor, offset: usize) -> Tensor {
    let mut out = Tensor::zeros(scores.rows(), scores.cols());
    for i in 0..scores.rows() {
        let limit = (i + offset + 1).min(scores.cols());
        let row = scores.row(i);
        let max = row[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..limit {
            let e = (row[j] - max).exp();
            out.set(i, j, e);
            sum += e;
        }
        for j in 0..limit {
            out.set(i, j, out.at(i, j) / sum);
        }
    }
    out
}

/// Per-row layer norm: y = gain ⊙ (x − μ) / sqrt(var + eps) + bias.
/// Returns (y, mean per row, inv_std per row) for the backward pass.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> (Tensor, Vec<f64>, Vec<f64>) {
    let d = x.cols();
    assert_eq!(gain.len(), d);
    assert_eq!(bias.len(), d);
    let mut out = Tensor::zeros(x.rows(), d);
    let mut means = Vec::with_capacity(x.rows());
    let mut inv_stds = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for c in 0..d {
            out.set(r, c, gain.data()[c] * (row[c] - mean) * inv_std + bias.data()[c]);
        }
        means.push(mean);
        inv_stds.push(inv_std);
    }
    (out, means, inv_stds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn matmul_modes_agree_with_explicit_transpose() {
        let mut rng = rng_for(1, "t");
        let a = Tensor::randn(3, 4, 1.0, &mut rng);
        let b = Tensor::randn(4, 5, 1.0, &mut rng);
        let nn = a.matmul(&b, MatMul::NN);
        let nt = a.matmul(&b.transpose(), MatMul::NT);
        let tn = a.transpose().matmul(&b, MatMul::TN);
        assert!(nn.rel_diff(&nt) < 1e-15);
        assert!(nn.rel_diff(&tn) < 1e-15);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let s = Tensor::from_vec(3, 3, vec![1.0, 9.0, 9.0, 0.5, 0.5, 9.0, 1.0, 1.0, 1.0]);
        let p = causal_softmax(&s, 0);
        assert_eq!(p.at(0, 1), 0.0);
        assert_eq!(p.at(0, 2), 0.0);
        assert_eq!(p.at(1, 2), 0.0);
        assert!((p.at(0, 0) - 1.0).abs() < 1e-12);
        for i in 0..3 {
            let sum: f64 = p.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let x = Tensor::from_vec(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0]);
        let g = Tensor::from_vec(1, 4, vec![1.0; 4]);
        let b = Tensor::from_vec(1, 4, vec![0.0; 4]);
        let (y, _, _) = layer_norm(&x, &g, &b, 1e-5);
        for r in 0..2 {
            let mean: f64 = y.row(r).iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn normalize_rows_handles_zero() {
        let x = Tensor::from_vec(2, 2, vec![3.0, 4.0, 0.0, 0.0]);
        let n = x.normalize_rows();
        assert!((n.at(0, 0) - 0.6).abs() < 1e-12);
        assert!((n.at(0, 1) - 0.8).abs() < 1e-12);
        assert_eq!(n.at(1, 0), 0.0);
        assert_eq!(n.at(1, 1), 0.0);
    }

    #[test]
    fn log_softmax_rows_is_stable() {
        let x = Tensor::from_vec(1, 3, vec![1000.0, 1000.0, 1000.0]);
        let l = x.log_softmax_rows();
        for v in l.data() {
            assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        }
    }
}
