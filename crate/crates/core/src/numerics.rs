//! Minimal dense linear algebra and stochastic primitives.
//!
//! Everything here is 64-bit and row-major. The matrices in this crate are
//! small (latent dimension ≤ 50, history length ≤ 40), so there is no BLAS
//! backend and no sparse storage; the point is exact control over masking,
//! error behavior, and determinism.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for r in rows {
            assert_eq!(r.len(), ncols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix { rows: rows.len(), cols: ncols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] += v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// `self * rhs`
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = rhs.row(k);
                let o_row = out.row_mut(i);
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * rhsᵀ`
    pub fn matmul_tr(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.cols, "matmul_tr shape mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..rhs.rows {
                out.set(i, j, dot(a_row, rhs.row(j)));
            }
        }
        out
    }

    /// `selfᵀ * rhs`
    pub fn tr_matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.rows, rhs.rows, "tr_matmul shape mismatch");
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = rhs.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = out.row_mut(i);
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// `self += s * rhs`
    pub fn add_scaled(&mut self, rhs: &Matrix, s: f64) {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "add_scaled shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += s * b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, rhs: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Boolean mask with the same shape as the matrix it applies to.
/// `true` means the entry participates; `false` means it is masked out.
#[derive(Debug, Clone)]
pub struct Mask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mask { rows, cols, data }
    }

    /// Lower-triangular mask: position i may attend to positions j ≤ i.
    pub fn causal(n: usize) -> Self {
        Mask::from_fn(n, n, |i, j| j <= i)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }
}

/// Row-wise softmax with optional masking.
///
/// Masked entries come out exactly 0; each row sums to 1 over its unmasked
/// entries. Computed with max-subtraction so large scores do not overflow.
pub fn softmax_rows(m: &Matrix, mask: Option<&Mask>) -> Result<Matrix> {
    if let Some(mask) = mask {
        if (mask.rows(), mask.cols()) != (m.rows(), m.cols()) {
            return Err(Error::shape(format!(
                "softmax mask {}x{} vs matrix {}x{}",
                mask.rows(),
                mask.cols(),
                m.rows(),
                m.cols()
            )));
        }
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let unmasked = |j: usize| mask.map_or(true, |mk| mk.get(i, j));
        let mut max = f64::NEG_INFINITY;
        for j in 0..m.cols() {
            if unmasked(j) {
                max = max.max(m.get(i, j));
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::numeric(format!("softmax row {i} is fully masked")));
        }
        let mut sum = 0.0;
        for j in 0..m.cols() {
            if unmasked(j) {
                let e = (m.get(i, j) - max).exp();
                out.set(i, j, e);
                sum += e;
            }
        }
        for j in 0..m.cols() {
            if unmasked(j) {
                out.set(i, j, out.get(i, j) / sum);
            }
        }
    }
    Ok(out)
}

/// A square matrix asserted symmetric positive definite.
///
/// Construction checks symmetry (within 1e-10); positive definiteness is
/// caught lazily by [`cholesky`], which fails on a nonpositive pivot.
#[derive(Debug, Clone)]
pub struct SpdMatrix(Matrix);

impl SpdMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::shape(format!("SPD matrix must be square, got {}x{}", m.rows(), m.cols())));
        }
        for i in 0..m.rows() {
            for j in (i + 1)..m.cols() {
                if (m.get(i, j) - m.get(j, i)).abs() > 1e-10 {
                    return Err(Error::numeric(format!(
                        "matrix not symmetric at ({i},{j}): {} vs {}",
                        m.get(i, j),
                        m.get(j, i)
                    )));
                }
            }
        }
        Ok(SpdMatrix(m))
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &v) in diag.iter().enumerate() {
            m.set(i, i, v);
        }
        SpdMatrix::new(m)
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        let mut m = Matrix::identity(n);
        m.scale(s);
        SpdMatrix(m)
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Cholesky factorization: returns lower-triangular `L` with `L Lᵀ = s`.
pub fn cholesky(s: &SpdMatrix) -> Result<Matrix> {
    let n = s.dim();
    let a = s.as_matrix();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::numeric(format!(
                        "matrix is not positive definite: pivot {sum:.3e} at row {i}"
                    )));
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solve `s x = b` for SPD `s` via Cholesky (forward + back substitution).
pub fn spd_solve(s: &SpdMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = s.dim();
    if b.len() != n {
        return Err(Error::shape(format!("spd_solve rhs length {} vs dim {n}", b.len())));
    }
    let l = cholesky(s)?;
    // L y = b
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l.get(i, k) * y[k];
        }
        y[i] = sum / l.get(i, i);
    }
    // Lᵀ x = y
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l.get(k, i) * x[k];
        }
        x[i] = sum / l.get(i, i);
    }
    Ok(x)
}

/// Inverse of an SPD matrix via Cholesky, column by column.
pub fn spd_inverse(s: &SpdMatrix) -> Result<Matrix> {
    let n = s.dim();
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = spd_solve(s, &e)?;
        for i in 0..n {
            inv.set(i, j, col[i]);
        }
        e[j] = 0.0;
    }
    Ok(inv)
}

/// Draw `mean + L ξ` with `ξ` i.i.d. standard normal and `L Lᵀ = cov`.
pub fn sample_gaussian(mean: &[f64], cov: &SpdMatrix, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if mean.len() != cov.dim() {
        return Err(Error::shape(format!(
            "mean length {} vs covariance dim {}",
            mean.len(),
            cov.dim()
        )));
    }
    let l = cholesky(cov)?;
    let xi: Vec<f64> = (0..mean.len()).map(|_| StandardNormal.sample(rng)).collect();
    let mut out = mean.to_vec();
    for i in 0..mean.len() {
        for k in 0..=i {
            out[i] += l.get(i, k) * xi[k];
        }
    }
    Ok(out)
}

/// Central-difference gradient oracle: `(f(x+h eᵢ) − f(x−h eᵢ)) / 2h`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite function value near coordinate {i}: f+={fp}, f-={fm}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Default step for [`finite_diff_grad`].
pub const FD_STEP: f64 = 1e-5;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn softmax_symmetric_row() {
        let m = Matrix::from_rows(&[&[0.0, 0.0]]);
        let s = softmax_rows(&m, None).unwrap();
        assert_abs_diff_eq!(s.get(0, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.get(0, 1), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn softmax_analytic_row() {
        let m = Matrix::from_rows(&[&[2.0f64.ln(), 0.0]]);
        let s = softmax_rows(&m, None).unwrap();
        assert_abs_diff_eq!(s.get(0, 0), 2.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.get(0, 1), 1.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn softmax_single_unmasked_entry() {
        let m = Matrix::from_rows(&[&[123.0, -7.0]]);
        let mask = Mask::from_fn(1, 2, |_, j| j == 0);
        let s = softmax_rows(&m, Some(&mask)).unwrap();
        assert_eq!(s.get(0, 0), 1.0);
        assert_eq!(s.get(0, 1), 0.0);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let m = Matrix::from_rows(&[&[1.0, 2.0]]);
        let mask = Mask::from_fn(1, 2, |_, _| false);
        assert!(softmax_rows(&m, Some(&mask)).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(1..8);
            let m = Matrix::from_fn(n, n, |_, _| rng.gen_range(-30.0..30.0));
            let mask = Mask::causal(n);
            let s = softmax_rows(&m, Some(&mask)).unwrap();
            for i in 0..n {
                let sum: f64 = s.row(i).iter().sum();
                assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
                for j in (i + 1)..n {
                    assert_eq!(s.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn cholesky_identity() {
        let s = SpdMatrix::new(Matrix::identity(2)).unwrap();
        let l = cholesky(&s).unwrap();
        assert_eq!(l, Matrix::identity(2));
    }

    #[test]
    fn cholesky_two_by_two() {
        let s = SpdMatrix::new(Matrix::from_rows(&[&[4.0, 2.0], &[2.0, 3.0]])).unwrap();
        let l = cholesky(&s).unwrap();
        assert_abs_diff_eq!(l.get(0, 0), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.get(0, 1), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.get(1, 0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.get(1, 1), 2.0f64.sqrt(), epsilon = 1e-12);
        let rec = l.matmul_tr(&l);
        assert!(rec.max_abs_diff(s.as_matrix()) < 1e-9);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let s = SpdMatrix::new(Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]])).unwrap();
        assert!(cholesky(&s).is_err());
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let n = rng.gen_range(1..9);
            let b = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let mut a = b.matmul_tr(&b);
            for i in 0..n {
                a.add_at(i, i, 1e-6);
            }
            // Symmetrize exactly: b bᵀ can be off by rounding.
            for i in 0..n {
                for j in 0..i {
                    let avg = 0.5 * (a.get(i, j) + a.get(j, i));
                    a.set(i, j, avg);
                    a.set(j, i, avg);
                }
            }
            let s = SpdMatrix::new(a.clone()).unwrap();
            let l = cholesky(&s).unwrap();
            assert!(l.matmul_tr(&l).max_abs_diff(&a) < 1e-8);
        }
    }

    #[test]
    fn spd_solve_and_inverse_agree() {
        let s = SpdMatrix::new(Matrix::from_rows(&[&[4.0, 2.0], &[2.0, 3.0]])).unwrap();
        let x = spd_solve(&s, &[1.0, 1.0]).unwrap();
        // [[4,2],[2,3]] x = [1,1] -> x = [1/8, 1/4]
        assert_abs_diff_eq!(x[0], 0.125, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 0.25, epsilon = 1e-12);
        let inv = spd_inverse(&s).unwrap();
        let prod = inv.matmul(s.as_matrix());
        assert!(prod.max_abs_diff(&Matrix::identity(2)) < 1e-10);
    }

    #[test]
    fn gaussian_degenerate_covariance_returns_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cov = SpdMatrix::scaled_identity(3, 1e-12);
        let mean = [1.0, -2.0, 0.5];
        let x = sample_gaussian(&mean, &cov, &mut rng).unwrap();
        for (a, b) in x.iter().zip(mean.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-5);
        }
    }

    #[test]
    fn gaussian_deterministic_given_state() {
        let cov = SpdMatrix::new(Matrix::from_rows(&[&[2.0, 0.5], &[0.5, 1.0]])).unwrap();
        let mean = [0.0, 0.0];
        let mut rng1 = ChaCha8Rng::seed_from_u64(42);
        let mut rng2 = ChaCha8Rng::seed_from_u64(42);
        let a = sample_gaussian(&mean, &cov, &mut rng1).unwrap();
        let b = sample_gaussian(&mean, &cov, &mut rng2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_sample_mean_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cov = SpdMatrix::scaled_identity(2, 1.0);
        let mean = [0.0, 0.0];
        let mut acc = [0.0, 0.0];
        let n = 10_000;
        for _ in 0..n {
            let x = sample_gaussian(&mean, &cov, &mut rng).unwrap();
            acc[0] += x[0];
            acc[1] += x[1];
        }
        assert!((acc[0] / n as f64).abs() < 0.05);
        assert!((acc[1] / n as f64).abs() < 0.05);
    }

    #[test]
    fn finite_diff_matches_analytic() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], FD_STEP).unwrap();
        assert_abs_diff_eq!(g[0], 6.0, epsilon = 1e-6);

        let g = finite_diff_grad(|_| 4.25, &[1.0, 2.0, 3.0], FD_STEP).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let g = finite_diff_grad(|x| sigmoid(x[0]), &[0.0], FD_STEP).unwrap();
        assert_abs_diff_eq!(g[0], 0.25, epsilon = 1e-8);
    }

    #[test]
    fn finite_diff_polynomial_gradient() {
        // f(x, y) = x^3 y + 2 y^2; ∇f = (3x^2 y, x^3 + 4y)
        let f = |v: &[f64]| v[0].powi(3) * v[1] + 2.0 * v[1] * v[1];
        let x = [1.3, -0.7];
        let g = finite_diff_grad(f, &x, FD_STEP).unwrap();
        assert_abs_diff_eq!(g[0], 3.0 * 1.3f64.powi(2) * -0.7, epsilon = 1e-6);
        assert_abs_diff_eq!(g[1], 1.3f64.powi(3) + 4.0 * -0.7, epsilon = 1e-6);
    }

    #[test]
    fn finite_diff_rejects_non_finite() {
        // ln(x - h) is NaN when the probe crosses zero.
        let f = |x: &[f64]| x[0].ln();
        assert!(finite_diff_grad(f, &[1e-7], FD_STEP).is_err());
    }

    #[test]
    fn sigmoid_basics() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let x: f64 = rng.gen_range(-40.0..40.0);
            assert_abs_diff_eq!(sigmoid(-x), 1.0 - sigmoid(x), epsilon = 1e-12);
        }
    }
}
