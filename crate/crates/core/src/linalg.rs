//! Dense row-major matrices and the stable special functions the rest of the
//! crate builds on.
//!
//! Everything here is `f64` and every reduction runs in a fixed left-to-right
//! order, so two runs under the same seed produce bit-identical results.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense row-major matrix of finite `f64` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix whose rows are the given slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Contract(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out.check_finite()?;
        Ok(out)
    }

    /// `self · otherᵀ`, without materialising the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Contract(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out.check_finite()?;
        Ok(out)
    }

    /// `selfᵀ · other`, without materialising the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Contract(format!(
                "t_matmul ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out.check_finite()?;
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Contract(format!("add {:?} to {:?}", other.shape(), self.shape())));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Frobenius norm restricted to the given columns.
    pub fn columns_norm(&self, cols: &[usize]) -> f64 {
        let mut acc = 0.0;
        for r in 0..self.rows {
            for &c in cols {
                let v = self.get(r, c);
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    /// Scales the given columns in place.
    pub fn scale_columns(&mut self, cols: &[usize], s: f64) {
        for r in 0..self.rows {
            for &c in cols {
                self.data[r * self.cols + c] *= s;
            }
        }
    }

    /// Appends `extra` zero columns.
    pub fn with_extra_columns(&self, extra: usize) -> Matrix {
        let cols = self.cols + extra;
        Matrix::from_fn(self.rows, cols, |r, c| if c < self.cols { self.get(r, c) } else { 0.0 })
    }

    /// Appends `extra` zero rows.
    pub fn with_extra_rows(&self, extra: usize) -> Matrix {
        let mut data = self.data.clone();
        data.extend(std::iter::repeat_n(0.0, extra * self.cols));
        Matrix {
            rows: self.rows + extra,
            cols: self.cols,
            data,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Contract("non-finite result".into()))
        }
    }
}

/// Standard product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Square root of the sum of squared entries.
pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates nonnegativity and unit mass (within 1e-12).
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Contract("probability weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!("probability mass {total} != 1")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn point_mass(n: usize, at: usize) -> Self {
        let mut w = vec![0.0; n];
        w[at] = 1.0;
        Self(w)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total mass on a subset of indices.
    pub fn mass_on(&self, idx: impl IntoIterator<Item = usize>) -> f64 {
        idx.into_iter().map(|j| self.0[j]).sum()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// `exp(z/τ) / Σ exp(z_k/τ)` with max subtraction.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<ProbVector> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::Contract("softmax of an empty vector".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Contract("non-finite logit".into()));
    }
    Ok(ProbVector(softmax_unchecked(logits, tau)))
}

pub(crate) fn softmax_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|z| ((z - max) / tau).exp()).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntropyUnit {
    Bits,
    Nats,
}

/// `−Σ p log p` with `0 · log 0 = 0`.
pub fn entropy(p: &ProbVector, unit: EntropyUnit) -> f64 {
    entropy_of(p.as_slice(), unit)
}

pub(crate) fn entropy_of(p: &[f64], unit: EntropyUnit) -> f64 {
    let nats: f64 = p.iter().filter(|&&w| w > 0.0).map(|&w| -w * w.ln()).sum();
    let h = match unit {
        EntropyUnit::Nats => nats,
        EntropyUnit::Bits => nats / std::f64::consts::LN_2,
    };
    h.max(0.0)
}

/// Dominant eigenpair of a symmetric positive semi-definite matrix by power
/// iteration. Returns `(eigenvalue, unit eigenvector)`.
pub fn power_iteration(m: &Matrix, max_iters: usize, tol: f64) -> Result<(f64, Vec<f64>)> {
    let n = m.rows();
    if n != m.cols() || n == 0 {
        return Err(Error::Contract("power iteration needs a square matrix".into()));
    }
    // Start away from any coordinate axis so axis-aligned spectra still converge.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * (i as f64 + 1.0).sin()).collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut lambda = 0.0;
    for _ in 0..max_iters {
        let mut w: Vec<f64> = (0..n).map(|r| dot(m.row(r), &v)).collect();
        let nw = norm2(&w);
        if nw == 0.0 {
            return Ok((0.0, v));
        }
        w.iter_mut().for_each(|x| *x /= nw);
        let next = (0..n).map(|r| w[r] * dot(m.row(r), &w)).sum::<f64>();
        let diff: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = w;
        let done = (next - lambda).abs() <= tol * next.abs().max(1.0) && diff < tol.sqrt();
        lambda = next;
        if done {
            break;
        }
    }
    Ok((lambda, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(3, 3, &mut rng);
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap(), m);
        let a = Matrix::new(1, 1, vec![2.0]).unwrap();
        let b = Matrix::new(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(4, 4, &mut rng);
        let b = random(4, 4, &mut rng);
        assert_eq!(a.matmul(&b).unwrap(), naive(&a, &b));
        assert_eq!(a.matmul_t(&b).unwrap(), naive(&a, &b.transpose()));
        assert_eq!(a.t_matmul(&b).unwrap(), naive(&a.transpose(), &b));
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Matrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_temp(&[0.7; 4], 1.0).unwrap();
        for &w in p.as_slice() {
            assert!((w - 0.25).abs() < 1e-15);
        }
        let p = softmax_temp(&[50.0, 0.0], 0.1).unwrap();
        assert!(p[0] > 1.0 - 1e-12);
        // e²/(e²+1) and 1/(e²+1), 30-digit mpmath evaluation.
        let p = softmax_temp(&[2.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 0.880797077977882444059729141302).abs() < 1e-15);
        assert!((p[1] - 0.119202922022117555940270858698).abs() < 1e-15);
        assert!(matches!(softmax_temp(&[1.0], 0.0), Err(Error::Parameter(_))));
        assert!(matches!(softmax_temp(&[1.0], -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 2)), 0.0);
        assert!((frobenius_norm(&Matrix::identity(2)) - 2f64.sqrt()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random(3, 3, &mut rng);
        let mut acc = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                acc += m.get(r, c).powi(2);
            }
        }
        let oracle = acc.sqrt();
        assert!((frobenius_norm(&m) - oracle).abs() <= 1e-14 * oracle);
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&ProbVector::uniform(8), EntropyUnit::Bits) - 3.0).abs() < 1e-12);
        assert_eq!(entropy(&ProbVector::point_mass(5, 2), EntropyUnit::Nats), 0.0);
        let p = ProbVector::new(vec![0.5, 0.25, 0.25]).unwrap();
        assert!((entropy(&p, EntropyUnit::Bits) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn power_iteration_finds_top_eigenvalue() {
        let m = Matrix::new(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let (l, v) = power_iteration(&m, 1000, 1e-14).unwrap();
        assert!((l - 3.0).abs() < 1e-10);
        assert!((v[0].abs() - v[1].abs()).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(logits in prop::collection::vec(-20.0f64..20.0, 1..12),
                                   shift in -100.0f64..100.0, tau in 0.05f64..5.0) {
            let a = softmax_temp(&logits, tau).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let b = softmax_temp(&shifted, tau).unwrap();
            let total: f64 = a.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn bits_are_nats_over_ln2(raw in prop::collection::vec(0.0f64..1.0, 1..16)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-6);
            let p = ProbVector(raw.iter().map(|w| w / total).collect());
            let bits = entropy(&p, EntropyUnit::Bits);
            let nats = entropy(&p, EntropyUnit::Nats);
            prop_assert!((bits - nats / std::f64::consts::LN_2).abs() <= 1e-12);
        }

        #[test]
        fn matmul_associative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(3, 4, &mut rng);
            let b = random(4, 2, &mut rng);
            let c = random(2, 5, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = frobenius_norm(&left).max(1e-300);
            let mut diff = left.clone();
            diff.add_scaled(&right, -1.0).unwrap();
            prop_assert!(frobenius_norm(&diff) <= 1e-10 * scale);
        }
    }
}
