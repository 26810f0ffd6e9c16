//! Dense row-major matrices and the handful of numerical kernels the flow
//! needs: products, power-iteration spectral norms, cyclic Jacobi for
//! symmetric spectra and LU log-determinants.

use std::ops::{Index, IndexMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input, so it is
    /// meant for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in rows {
            assert_eq!(r.len(), n_cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: n_rows,
            cols: n_cols,
            data,
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn column(values: Vec<f64>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    /// Matrix with i.i.d. standard normal entries.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Self { rows, cols, data }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same entries viewed with a different shape.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Self> {
        Self::from_vec(rows, cols, self.data)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(self.matmul_unchecked(other))
    }

    pub(crate) fn matmul_unchecked(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · v` for a vector given as a slice.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.cols, v.len());
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ · v`.
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.rows, v.len());
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub(crate) fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        debug_assert_eq!(self.shape(), other.shape());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|a| a * s)
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds a 1×cols row vector to every row.
    pub fn add_row_broadcast(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::DimensionMismatch {
                op: "add_row_broadcast",
                left: self.shape(),
                right: row.shape(),
            });
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (o, &b) in out.data[i * self.cols..(i + 1) * self.cols]
                .iter_mut()
                .zip(&row.data)
            {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Rank-3 tensor stored row-major over `(d1, d2, d3)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d1: usize, d2: usize, d3: usize) -> Self {
        Self {
            dims: (d1, d2, d3),
            data: vec![0.0; d1 * d2 * d3],
        }
    }

    pub fn from_vec(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::DimensionMismatch {
                op: "tensor3_from_vec",
                left: (dims.0 * dims.1, dims.2),
                right: (data.len(), 1),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The channel vector at `(i, j)`.
    pub fn fiber(&self, i: usize, j: usize) -> &[f64] {
        let r = self.dims.2;
        let start = (i * self.dims.1 + j) * r;
        &self.data[start..start + r]
    }

    pub fn fiber_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let r = self.dims.2;
        let start = (i * self.dims.1 + j) * r;
        &mut self.data[start..start + r]
    }

    /// Views the entries as a `rows × cols` matrix; `rows · cols` must equal
    /// the entry count.
    pub fn to_matrix(&self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.data.clone())
    }

    pub fn from_matrix(m: Matrix, dims: (usize, usize, usize)) -> Result<Self> {
        Self::from_vec(dims, m.into_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize, usize)> for Tensor3 {
    type Output = f64;

    fn index(&self, (i, j, k): (usize, usize, usize)) -> &f64 {
        &self.data[(i * self.dims.1 + j) * self.dims.2 + k]
    }
}

impl IndexMut<(usize, usize, usize)> for Tensor3 {
    fn index_mut(&mut self, (i, j, k): (usize, usize, usize)) -> &mut f64 {
        &mut self.data[(i * self.dims.1 + j) * self.dims.2 + k]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Warm-start state for power iteration on one weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralNormState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub sigma_estimate: f64,
    pub iterations_per_step: usize,
}

/// Upper cap on the refinement loop in [`normalize_to_bound`].
pub const MAX_POWER_ITERATIONS: usize = 1000;

impl SpectralNormState {
    /// Random unit starting vectors for a `rows × cols` matrix.
    pub fn new<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let mut u: Vec<f64> = (0..rows)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let mut v: Vec<f64> = (0..cols)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        normalize_or_basis(&mut u);
        normalize_or_basis(&mut v);
        Self {
            u,
            v,
            sigma_estimate: 0.0,
            iterations_per_step: 1,
        }
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations_per_step = iterations.max(1);
        self
    }
}

fn normalize_or_basis(x: &mut [f64]) {
    let n = norm(x);
    if n > 0.0 && n.is_finite() {
        x.iter_mut().for_each(|a| *a /= n);
    } else if !x.is_empty() {
        x.iter_mut().for_each(|a| *a = 0.0);
        x[0] = 1.0;
    }
}

/// One power-iteration step `v ← Wᵀu/‖Wᵀu‖, u ← Wv/‖Wv‖`, returning `‖Wv‖`.
/// Leaves the state untouched and returns 0 when `W` annihilates the iterate.
fn power_step(w: &Matrix, state: &mut SpectralNormState) -> f64 {
    let wt_u = w.matvec_t(&state.u);
    let n = norm(&wt_u);
    if n == 0.0 {
        // u may be orthogonal to range(W); restart from v.
        let wv = w.matvec(&state.v);
        let s = norm(&wv);
        if s == 0.0 {
            return 0.0;
        }
        state.u = wv.iter().map(|a| a / s).collect();
        return s;
    }
    let v: Vec<f64> = wt_u.iter().map(|a| a / n).collect();
    let wv = w.matvec(&v);
    let s = norm(&wv);
    if s == 0.0 {
        return 0.0;
    }
    state.v = v;
    state.u = wv.iter().map(|a| a / s).collect();
    s
}

/// Runs `state.iterations_per_step` warm-started power iterations and
/// returns the updated largest-singular-value estimate. A zero matrix yields
/// 0 and leaves `u`, `v` unchanged.
pub fn spectral_norm(w: &Matrix, state: &mut SpectralNormState) -> f64 {
    debug_assert_eq!(state.u.len(), w.rows());
    debug_assert_eq!(state.v.len(), w.cols());
    let mut sigma = 0.0;
    for _ in 0..state.iterations_per_step.max(1) {
        sigma = power_step(w, state);
        if sigma == 0.0 {
            break;
        }
    }
    state.sigma_estimate = sigma;
    sigma
}

/// Power iteration that keeps going after the configured per-step count
/// until the estimate stops moving (relative change below `1e-14`).
pub fn spectral_norm_converged(w: &Matrix, state: &mut SpectralNormState) -> f64 {
    let mut sigma = spectral_norm(w, state);
    if sigma == 0.0 {
        return 0.0;
    }
    for _ in 0..MAX_POWER_ITERATIONS {
        let next = power_step(w, state);
        let done = (next - sigma).abs() <= 1e-14 * next;
        sigma = sigma.max(next);
        if done {
            break;
        }
    }
    state.sigma_estimate = sigma;
    sigma
}

/// Scales `w` by `min(1, bound / σ_max(w))`.
pub fn normalize_to_bound(w: &Matrix, bound: f64, state: &mut SpectralNormState) -> Result<Matrix> {
    if !(bound > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "spectral bound must be positive, got {bound}"
        )));
    }
    let sigma = spectral_norm_converged(w, state);
    if sigma <= bound {
        return Ok(w.clone());
    }
    Ok(w.scale(bound / sigma))
}

/// Eigenvalues and eigenvectors (as columns) of a symmetric matrix, eigenvalues
/// ascending. Cyclic Jacobi rotations.
pub fn sym_eigen(s: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if !s.is_square() {
        return Err(Error::DimensionMismatch {
            op: "sym_eigen",
            left: s.shape(),
            right: s.shape(),
        });
    }
    let scale = s
        .as_slice()
        .iter()
        .fold(0.0f64, |m, a| m.max(a.abs()))
        .max(1.0);
    let asym = s.max_asymmetry();
    if asym > 1e-9 * scale {
        return Err(Error::NotSymmetric {
            max_asymmetry: asym,
        });
    }
    let n = s.rows();
    let mut a = s.clone();
    // symmetrize exactly so rotations see one value per pair
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
    let mut v = Matrix::identity(n);

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        let diag: f64 = (0..n).map(|i| a[(i, i)] * a[(i, i)]).sum();
        if off <= 1e-30 * diag.max(1e-300) || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, new_col)] = v[(k, old_col)];
        }
    }
    Ok((values, vectors))
}

/// All eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(s: &Matrix) -> Result<Vec<f64>> {
    sym_eigen(s).map(|(values, _)| values)
}

/// Largest singular value via the spectrum of `WᵀW` (or `WWᵀ`, whichever is
/// smaller). Exact up to Jacobi round-off; used where a guaranteed bound is
/// needed rather than a warm-started estimate.
pub fn sigma_max(w: &Matrix) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    let gram = if w.rows() >= w.cols() {
        w.transpose().matmul_unchecked(w)
    } else {
        w.matmul_unchecked(&w.transpose())
    };
    let values = sym_eigenvalues(&gram).expect("Gram matrix is symmetric");
    values.last().copied().unwrap_or(0.0).max(0.0).sqrt()
}

/// `log|det J|` together with the sign of the determinant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogAbsDet {
    pub value: f64,
    pub sign: f64,
}

impl LogAbsDet {
    pub fn is_singular(&self) -> bool {
        self.sign == 0.0
    }
}

/// LU decomposition with partial pivoting. A singular matrix yields
/// `value = -inf`, `sign = 0`.
pub fn exact_logabsdet(j: &Matrix) -> Result<LogAbsDet> {
    if !j.is_square() {
        return Err(Error::DimensionMismatch {
            op: "exact_logabsdet",
            left: j.shape(),
            right: j.shape(),
        });
    }
    let n = j.rows();
    let mut lu = j.clone();
    let mut sign = 1.0;
    let mut log_abs = 0.0;
    for k in 0..n {
        let (pivot_row, pivot_abs) =
            (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold(
                    (k, -1.0),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
        if pivot_abs == 0.0 {
            return Ok(LogAbsDet {
                value: f64::NEG_INFINITY,
                sign: 0.0,
            });
        }
        if pivot_row != k {
            for c in 0..n {
                let tmp = lu[(k, c)];
                lu[(k, c)] = lu[(pivot_row, c)];
                lu[(pivot_row, c)] = tmp;
            }
            sign = -sign;
        }
        let pivot = lu[(k, k)];
        if pivot < 0.0 {
            sign = -sign;
        }
        log_abs += pivot.abs().ln();
        for i in (k + 1)..n {
            let factor = lu[(i, k)] / pivot;
            if factor == 0.0 {
                continue;
            }
            for c in (k + 1)..n {
                lu[(i, c)] -= factor * lu[(k, c)];
            }
        }
    }
    Ok(LogAbsDet {
        value: log_abs,
        sign,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    /// One-sided Jacobi (Hestenes) SVD; returns singular values descending.
    fn svd_oracle(w: &Matrix) -> Vec<f64> {
        let mut a = if w.rows() >= w.cols() {
            w.clone()
        } else {
            w.transpose()
        };
        let (m, n) = a.shape();
        for _ in 0..200 {
            let mut rotated = false;
            for p in 0..n {
                for q in (p + 1)..n {
                    let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                    for i in 0..m {
                        alpha += a[(i, p)] * a[(i, p)];
                        beta += a[(i, q)] * a[(i, q)];
                        gamma += a[(i, p)] * a[(i, q)];
                    }
                    if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..m {
                        let ap = a[(i, p)];
                        let aq = a[(i, q)];
                        a[(i, p)] = c * ap - s * aq;
                        a[(i, q)] = s * ap + c * aq;
                    }
                }
            }
            if !rotated {
                break;
            }
        }
        let mut sv: Vec<f64> = (0..n)
            .map(|j| (0..m).map(|i| a[(i, j)] * a[(i, j)]).sum::<f64>().sqrt())
            .collect();
        sv.sort_by(|x, y| y.total_cmp(x));
        sv
    }

    fn cofactor_det(a: &Matrix) -> f64 {
        let n = a.rows();
        if n == 1 {
            return a[(0, 0)];
        }
        let mut det = 0.0;
        for col in 0..n {
            let mut minor = Matrix::zeros(n - 1, n - 1);
            for i in 1..n {
                let mut cj = 0;
                for j in 0..n {
                    if j == col {
                        continue;
                    }
                    minor[(i - 1, cj)] = a[(i, j)];
                    cj += 1;
                }
            }
            let sign = if col % 2 == 0 { 1.0 } else { -1.0 };
            det += sign * a[(0, col)] * cofactor_det(&minor);
        }
        det
    }

    /// Eigenvalues of a symmetric matrix as roots of its characteristic
    /// polynomial (Faddeev–LeVerrier coefficients, scan + bisection).
    fn charpoly_roots(s: &Matrix) -> Vec<f64> {
        let n = s.rows();
        // coefficients c[k] of λ^n + c1 λ^{n-1} + ... + cn
        let mut coeffs = vec![1.0];
        let mut m = Matrix::zeros(n, n);
        for k in 1..=n {
            let prev = coeffs[k - 1];
            let mut next = naive_matmul(s, &m);
            for i in 0..n {
                next[(i, i)] += prev;
            }
            m = next;
            let am = naive_matmul(s, &m);
            coeffs.push(-am.trace() / k as f64);
        }
        let eval = |x: f64| coeffs.iter().fold(0.0, |acc, &c| acc * x + c);
        let bound = 1.0 + s.as_slice().iter().map(|a| a.abs()).sum::<f64>();
        let steps = 200_000;
        let mut roots = Vec::new();
        let mut x0 = -bound;
        let mut f0 = eval(x0);
        for i in 1..=steps {
            let x1 = -bound + 2.0 * bound * i as f64 / steps as f64;
            let f1 = eval(x1);
            if f0 == 0.0 {
                roots.push(x0);
            } else if f0 * f1 < 0.0 {
                let (mut lo, mut hi) = (x0, x1);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if eval(lo) * eval(mid) <= 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                roots.push(0.5 * (lo + hi));
            }
            x0 = x1;
            f0 = f1;
        }
        roots
    }

    fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let a = Matrix::random_normal(n, n, rng);
        a.add(&a.transpose()).unwrap().scale(0.5)
    }

    #[test]
    fn matmul_identity_and_small() {
        let b = Matrix::from_rows(&[&[1.5, -2.0], &[0.25, 7.0]]);
        assert_eq!(Matrix::identity(2).matmul(&b).unwrap(), b);
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let x = Matrix::from_rows(&[&[0.0], &[1.0]]);
        assert_eq!(a.matmul(&x).unwrap(), Matrix::from_rows(&[&[2.0], &[4.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Matrix::random_normal(5, 5, &mut rng);
        let b = Matrix::random_normal(5, 5, &mut rng);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(
            a.matmul(&b),
            Err(Error::DimensionMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn spectral_norm_diagonal_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Matrix::diag(&[3.0, 1.0]);
        let mut st = SpectralNormState::new(2, 2, &mut rng).with_iterations(60);
        assert!((spectral_norm(&w, &mut st) - 3.0).abs() < 1e-12);

        let mut st = SpectralNormState::new(3, 3, &mut rng);
        assert!((spectral_norm(&Matrix::identity(3), &mut st) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spectral_norm_matches_svd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let w = Matrix::random_normal(6, 4, &mut rng);
            let mut st = SpectralNormState::new(6, 4, &mut rng).with_iterations(100);
            let sigma = spectral_norm(&w, &mut st);
            let oracle = svd_oracle(&w)[0];
            assert!((sigma - oracle).abs() < 1e-6, "{sigma} vs {oracle}");
            assert!(sigma <= oracle * (1.0 + 1e-6));
            assert!((norm(&st.u) - 1.0).abs() < 1e-9);
            assert!((norm(&st.v) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn spectral_norm_zero_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut st = SpectralNormState::new(3, 2, &mut rng);
        let before = st.clone();
        assert_eq!(spectral_norm(&Matrix::zeros(3, 2), &mut st), 0.0);
        assert_eq!(st.u, before.u);
        assert_eq!(st.v, before.v);
    }

    #[test]
    fn power_iteration_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::random_normal(7, 5, &mut rng);
        let mut st = SpectralNormState::new(7, 5, &mut rng);
        let mut last = 0.0;
        for _ in 0..50 {
            let s = spectral_norm(&w, &mut st);
            assert!(s >= last - 1e-12);
            last = s;
        }
    }

    #[test]
    fn normalize_to_bound_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Matrix::diag(&[2.0, 0.3]);
        let mut st = SpectralNormState::new(2, 2, &mut rng);
        let out = normalize_to_bound(&w, 0.9, &mut st).unwrap();
        assert!((svd_oracle(&out)[0] - 0.9).abs() < 1e-9);

        let small = Matrix::diag(&[0.5, -0.1]);
        let mut st = SpectralNormState::new(2, 2, &mut rng);
        assert_eq!(normalize_to_bound(&small, 0.9, &mut st).unwrap(), small);

        for _ in 0..20 {
            let w = Matrix::random_normal(4, 4, &mut rng);
            let mut st = SpectralNormState::new(4, 4, &mut rng);
            let out = normalize_to_bound(&w, 0.9, &mut st).unwrap();
            assert!(svd_oracle(&out)[0] <= 0.9 + 1e-6);
            // idempotent
            let again = normalize_to_bound(&out, 0.9, &mut st).unwrap();
            assert!(again.max_abs_diff(&out) < 1e-12);
        }
        assert!(normalize_to_bound(&w, 0.0, &mut st_dummy()).is_err());
    }

    fn st_dummy() -> SpectralNormState {
        SpectralNormState::new(2, 2, &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn eigenvalues_small_cases() {
        let d = sym_eigenvalues(&Matrix::diag(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(d, vec![1.0, 2.0, 3.0]);
        let swap = sym_eigenvalues(&Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert!((swap[0] + 1.0).abs() < 1e-14 && (swap[1] - 1.0).abs() < 1e-14);
        assert!(matches!(
            sym_eigenvalues(&Matrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]])),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn eigenvalues_match_charpoly_roots() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let s = random_symmetric(6, &mut rng);
            let ours = sym_eigenvalues(&s).unwrap();
            let oracle = charpoly_roots(&s);
            assert_eq!(oracle.len(), 6, "oracle missed a root: {oracle:?}");
            for (a, b) in ours.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
            assert!((ours.iter().sum::<f64>() - s.trace()).abs() < 1e-8);
        }
    }

    #[test]
    fn eigenvectors_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_symmetric(8, &mut rng);
        let (vals, vecs) = sym_eigen(&s).unwrap();
        let gram = vecs.transpose().matmul(&vecs).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(8)) < 1e-10);
        let recon = vecs
            .matmul(&Matrix::diag(&vals))
            .unwrap()
            .matmul(&vecs.transpose())
            .unwrap();
        assert!(recon.max_abs_diff(&s) < 1e-10);
    }

    #[test]
    fn max_abs_eigenvalue_equals_spectral_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let s = random_symmetric(5, &mut rng);
            let vals = sym_eigenvalues(&s).unwrap();
            let max_abs = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut st = SpectralNormState::new(5, 5, &mut rng);
            let sigma = spectral_norm_converged(&s, &mut st);
            assert!((max_abs - sigma).abs() < 1e-6);
        }
    }

    #[test]
    fn logabsdet_cases() {
        assert_eq!(exact_logabsdet(&Matrix::identity(4)).unwrap().value, 0.0);
        let d = exact_logabsdet(&Matrix::diag(&[2.0, 0.5])).unwrap();
        assert!(d.value.abs() < 1e-15);
        let sing = exact_logabsdet(&Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]])).unwrap();
        assert!(sing.is_singular() && sing.value == f64::NEG_INFINITY);
    }

    #[test]
    fn logabsdet_matches_cofactor_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3 {
            let a = Matrix::random_normal(8, 8, &mut rng)
                .scale(0.2)
                .add(&Matrix::identity(8))
                .unwrap();
            let det = cofactor_det(&a);
            let ours = exact_logabsdet(&a).unwrap();
            assert!((ours.value - det.abs().ln()).abs() < 1e-9);
            assert_eq!(ours.sign, det.signum());
        }
    }

    #[test]
    fn sigma_max_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for (r, c) in [(3, 5), (5, 3), (4, 4)] {
            let w = Matrix::random_normal(r, c, &mut rng);
            assert!((sigma_max(&w) - svd_oracle(&w)[0]).abs() < 1e-9);
        }
    }
}
