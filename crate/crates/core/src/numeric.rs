//! Dense kernels shared by every other module.
//!
//! Vectors are plain `f64` slices; [`Matrix`] is a row-major buffer. All
//! routines are pure.

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch { expected: cols, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + Clone {
        // chunks_exact(0) panics; a zero-column matrix has no meaningful rows
        self.data.chunks_exact(self.cols.max(1)).take(if self.cols == 0 { 0 } else { self.rows })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Copies the selected rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: indices.len(), cols: self.cols, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · otherᵀ`, shapes `[r×n] · [c×n]ᵀ = [r×c]`.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch { expected: other.cols, got: self.cols });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit Euclidean length.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NonFinite("l2_normalize"));
    }
    if n <= NORM_EPS {
        return Err(Error::ZeroNorm { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let na = norm(a);
    let nb = norm(b);
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(Error::ZeroNorm { norm: na.min(nb) });
    }
    // the product na*nb is symmetric, so swapping a and b yields the same bits
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `max(xs) + ln Σ exp(xs − max(xs))`.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if xs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !max.is_finite() {
        return Err(Error::NonFinite("log_sum_exp"));
    }
    if xs.len() == 1 {
        return Ok(xs[0]);
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Softmax computed with the same max shift as [`log_sum_exp`].
pub fn softmax(xs: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(xs)?;
    Ok(xs.iter().map(|x| (x - lse).exp()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[5.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn cosine_is_clamped() {
        let a = [0.1, 0.2, 0.3];
        let c = cosine_similarity(&a, &a).unwrap();
        assert!(c <= 1.0);
    }

    #[test]
    fn log_sum_exp_examples() {
        assert!((log_sum_exp(&[0.0; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[5.0]).unwrap(), 5.0);
        // 1000 + ln 2, ln 2 = 0.693147180559945309417232...
        let v = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((v - 1_000.693_147_180_559_9).abs() < 1e-12);
        assert!(matches!(log_sum_exp(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn matrix_shape_contract() {
        assert!(Matrix::from_vec(2, 3, vec![0.0; 5]).is_err());
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(m.row(1), &[3.0, 4.0]);
        let p = m.matmul_transposed(&Matrix::identity(2)).unwrap();
        assert_eq!(p, m);
    }

    fn nonzero_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, d).prop_filter("nonzero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn normalized_has_unit_norm(v in nonzero_vec(7)) {
            let u = l2_normalize(&v).unwrap();
            prop_assert!((norm(&u) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn cosine_symmetric(a in nonzero_vec(5), b in nonzero_vec(5)) {
            prop_assert_eq!(cosine_similarity(&a, &b).unwrap(), cosine_similarity(&b, &a).unwrap());
        }

        #[test]
        fn cosine_equals_dot_of_unit_vectors(a in nonzero_vec(6), b in nonzero_vec(6)) {
            let ua = l2_normalize(&a).unwrap();
            let ub = l2_normalize(&b).unwrap();
            let c = cosine_similarity(&ua, &ub).unwrap();
            prop_assert!((c - dot(&ua, &ub)).abs() < 1e-9);
        }

        #[test]
        fn log_sum_exp_shift(xs in prop::collection::vec(-50.0f64..50.0, 1..20), c in -500.0f64..500.0) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let a = log_sum_exp(&shifted).unwrap();
            let b = log_sum_exp(&xs).unwrap() + c;
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
