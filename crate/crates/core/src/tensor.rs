//! Dense fp64 matrices and the handful of kernels the rest of the crate needs.
//!
//! Every reduction accumulates in a fixed serial order, so the same inputs give
//! bit-identical outputs regardless of how many worker threads run above this
//! layer.

use std::fmt;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            f.debug_struct("Matrix")
                .field("shape", &(self.rows, self.cols))
                .field("data", &self.data)
                .finish()
        } else {
            f.debug_struct("Matrix")
                .field("shape", &(self.rows, self.cols))
                .field("rms", &rms_unchecked(&self.data))
                .finish_non_exhaustive()
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Matrix::new" });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and small fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Matrix) -> Result<Self> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Self> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Self> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        check_same("axpy", self, other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    fn zip_with(&self, op: &'static str, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        check_same(op, self, other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copies the listed columns, in order, into a new matrix.
    pub fn select_columns(&self, idx: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, idx.len());
        for r in 0..self.rows {
            let src = self.row(r);
            let dst = &mut out.data[r * idx.len()..(r + 1) * idx.len()];
            for (d, &c) in dst.iter_mut().zip(idx) {
                *d = src[c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// SHA-256 over the shape and little-endian bytes of every entry.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn finite_or(op: &'static str, m: Matrix) -> Result<Matrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::NonFinite { op })
    }
}

/// `a · b`, accumulating each output entry over the inner index in ascending order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, p) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, p);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let crow = &mut out.data[i * p..(i + 1) * p];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[kk * p..(kk + 1) * p];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aik * bv;
            }
        }
    }
    finite_or("matmul", out)
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (k, m, p) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, p);
    for kk in 0..k {
        let arow = &a.data[kk * m..(kk + 1) * m];
        let brow = &b.data[kk * p..(kk + 1) * p];
        for (i, &aki) in arow.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let crow = &mut out.data[i * p..(i + 1) * p];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aki * bv;
            }
        }
    }
    finite_or("matmul_tn", out)
}

/// `a · bᵀ`. Same accumulation order as a row-by-row dot product, computed
/// through the vectorisable `matmul` loop.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    matmul(a, &b.transpose())
}

/// Matrix with i.i.d. `N(0, sigma²)` entries.
pub fn gaussian(rows: usize, cols: usize, sigma: f64, rng: &mut Rng) -> Result<Matrix> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "gaussian: standard deviation must be finite and non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(Matrix::zeros(rows, cols));
    }
    let data = (0..rows * cols).map(|_| sigma * rng.normal()).collect();
    Ok(Matrix { rows, cols, data })
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes `upstream` through wherever `x > 0`.
pub fn relu_backward(x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    x.zip_with("relu_backward", upstream, |xv, u| if xv > 0.0 { u } else { 0.0 })
}

/// Root-mean-square of the entries: the per-coordinate magnitude.
pub fn rms(x: &Matrix) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::invalid("rms of an empty matrix"));
    }
    Ok(rms_unchecked(&x.data))
}

fn rms_unchecked(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let ss: f64 = v.iter().map(|x| x * x).sum();
    (ss / v.len() as f64).sqrt()
}

/// Cross-entropy of a single column of logits against `label`.
///
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Matrix, label: usize) -> Result<(f64, Matrix)> {
    if logits.cols != 1 {
        return Err(Error::invalid(format!(
            "softmax_cross_entropy expects a column vector, got {:?}",
            logits.shape()
        )));
    }
    let (loss, grad) = softmax_xent_batch(logits, &[label])?;
    Ok((loss, grad))
}

/// Mean cross-entropy over a column batch. The gradient is scaled by `1/batch`
/// so it is the gradient of the mean.
pub fn softmax_xent_batch(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (k, b) = logits.shape();
    if labels.len() != b {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {b} columns",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = Matrix::zeros(k, b);
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    for (j, &label) in labels.iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for i in 0..k {
            max = max.max(logits.get(i, j));
        }
        let mut z = 0.0;
        for i in 0..k {
            z += (logits.get(i, j) - max).exp();
        }
        let log_z = z.ln() + max;
        total += log_z - logits.get(label, j);
        for i in 0..k {
            let p = (logits.get(i, j) - log_z).exp();
            let onehot = if i == label { 1.0 } else { 0.0 };
            grad.set(i, j, (p - onehot) * inv_b);
        }
    }
    Ok((total * inv_b, grad))
}

/// Index of the largest entry in each column.
pub fn argmax_columns(m: &Matrix) -> Vec<usize> {
    (0..m.cols)
        .map(|j| {
            let mut best = 0;
            for i in 1..m.rows {
                if m.get(i, j) > m.get(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Seeded, platform-independent random stream (ChaCha8).
///
/// Child streams are derived from `(master seed, stream index)` so independent
/// experiment cells never share state.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn child(master: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(master);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Rng;
    use proptest::prelude::*;

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        gaussian(rows, cols, 1.0, rng).unwrap()
    }

    #[test]
    fn matmul_identity_zero_and_scalar() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&a, &Matrix::identity(2)).unwrap(), a);
        let z = matmul(&Matrix::identity(2), &Matrix::zeros(2, 1)).unwrap();
        assert_eq!(z, Matrix::zeros(2, 1));
        let s = matmul(&Matrix::from_rows(&[[1.0, 2.0]]), &Matrix::column(&[3.0, 4.0])).unwrap();
        assert_eq!(s.as_slice(), &[11.0]);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(err, Error::Shape { left: (2, 3), right: (2, 3), .. }));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = Rng::seed(3);
        let a = random(4, 5, &mut rng);
        let b = random(4, 3, &mut rng);
        let c = random(6, 5, &mut rng);
        assert_eq!(matmul_tn(&a, &b).unwrap(), matmul(&a.transpose(), &b).unwrap());
        let lhs = matmul_nt(&a, &c).unwrap();
        let rhs = matmul(&a, &c.transpose()).unwrap();
        for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_degenerate_and_negative_sigma() {
        let mut rng = Rng::seed(1);
        assert_eq!(gaussian(3, 4, 0.0, &mut rng).unwrap(), Matrix::zeros(3, 4));
        assert!(gaussian(3, 4, -1.0, &mut rng).is_err());
    }

    #[test]
    fn gaussian_variance_law_of_large_numbers() {
        let mut rng = Rng::seed(2024);
        let m = gaussian(1000, 1000, 1.0, &mut rng).unwrap();
        let n = m.len() as f64;
        let mean = m.sum() / n;
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((0.99..=1.01).contains(&var), "sample variance {var}");
    }

    #[test]
    fn gaussian_is_deterministic_per_seed() {
        let a = gaussian(7, 3, 0.5, &mut Rng::seed(99)).unwrap();
        let b = gaussian(7, 3, 0.5, &mut Rng::seed(99)).unwrap();
        assert_eq!(a, b);
        let c = gaussian(7, 3, 0.5, &mut Rng::child(99, 1)).unwrap();
        let d = gaussian(7, 3, 0.5, &mut Rng::child(99, 2)).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn relu_forward_and_mask() {
        let x = Matrix::column(&[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).as_slice(), &[0.0, 0.0, 2.0]);
        let back = relu_backward(&Matrix::column(&[-1.0, 2.0]), &Matrix::column(&[5.0, 7.0])).unwrap();
        assert_eq!(back.as_slice(), &[0.0, 7.0]);
        assert!(relu_backward(&Matrix::zeros(2, 1), &Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn rms_values() {
        let v = rms(&Matrix::column(&[3.0, 4.0])).unwrap();
        assert!((v - (12.5f64).sqrt()).abs() < 1e-15);
        assert_eq!(rms(&Matrix::zeros(4, 4)).unwrap(), 0.0);
        for n in [1, 7, 1000] {
            let r = rms(&Matrix::filled(n, 1, -2.5)).unwrap();
            assert!((r - 2.5).abs() < 1e-14);
        }
        assert!(rms(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let (loss, grad) = softmax_cross_entropy(&Matrix::zeros(10, 1), 3).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!(grad.sum().abs() < 1e-15);

        let mut logits = Matrix::zeros(10, 1);
        logits.set(4, 0, 1000.0);
        let (loss, _) = softmax_cross_entropy(&logits, 4).unwrap();
        assert!(loss.abs() < 1e-12);

        assert!(softmax_cross_entropy(&Matrix::zeros(10, 1), 10).is_err());
    }

    #[test]
    fn rng_shuffle_is_a_permutation() {
        let mut rng = Rng::seed(5);
        let mut v: Vec<usize> = (0..100).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in 0u64..10_000, m in 1usize..5, k in 1usize..5, p in 1usize..5, q in 1usize..5) {
            let mut rng = Rng::seed(seed);
            let a = random(m, k, &mut rng);
            let b = random(k, p, &mut rng);
            let c = random(p, q, &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.max_abs().max(1.0);
            for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-10 * scale);
            }
        }

        #[test]
        fn rms_is_absolutely_homogeneous(seed in 0u64..10_000, c in -50.0f64..50.0) {
            let x = random(4, 3, &mut Rng::seed(seed));
            let lhs = rms(&x.scale(c)).unwrap();
            let rhs = c.abs() * rms(&x).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
        }

        #[test]
        fn relu_is_idempotent(seed in 0u64..10_000) {
            let x = random(5, 5, &mut Rng::seed(seed));
            prop_assert_eq!(relu(&relu(&x)), relu(&x));
        }

        #[test]
        fn softmax_gradient_sums_to_zero(seed in 0u64..10_000, label in 0usize..10) {
            let logits = random(10, 1, &mut Rng::seed(seed)).scale(5.0);
            let (_, g) = softmax_cross_entropy(&logits, label).unwrap();
            prop_assert!(g.sum().abs() < 1e-12);
        }
    }
}
