//! Dense real linear algebra for the small matrices this crate works with.
//!
//! Samples are stored as the *columns* of a `d × n` [`Matrix`]. Vectors are
//! plain `[f64]` slices. Everything here is a pure function.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, GrwError, Result};

/// Above this size `extreme_eigenvalues` switches from Jacobi to power iteration.
pub const JACOBI_MAX_DIM: usize = 64;
/// Iteration cap for the power-iteration path.
pub const POWER_ITERATION_CAP: usize = 100_000;
/// Gram matrices with `λmin < RANK_TOL · λmax` are treated as singular.
pub const RANK_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-10;

/// Row-major dense matrix of finite `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data has {} entries, expected {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("matrix entries must be finite"));
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

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(invalid("ragged rows"));
        }
        Self::new(r, c, rows.concat())
    }

    /// Builds a `len × columns.len()` matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let c = columns.len();
        let r = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|col| col.len() != r) {
            return Err(invalid("columns have different lengths"));
        }
        let mut m = Self::zeros(r, c);
        for (j, col) in columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                m.data[i * c + j] = v;
            }
        }
        if m.data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("matrix entries must be finite"));
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.cols).map(|j| self.column(j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.get(i, j);
            }
        }
        t
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `A · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(invalid(format!(
                "matvec: vector length {} vs {} columns",
                v.len(),
                self.cols
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `Aᵀ · v`.
    pub fn tr_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(invalid(format!(
                "tr_matvec: vector length {} vs {} rows",
                v.len(),
                self.rows
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                axpy(vi, self.row(i), &mut out);
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(invalid(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a != 0.0 {
                    axpy(a, other.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.max_abs().max(1.0);
        (0..self.rows).all(|i| {
            (i + 1..self.cols).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol * scale)
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a · x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Cosine of the angle between `a` and `b`; 0 when either is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

pub fn normalized(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    if n == 0.0 {
        return a.to_vec();
    }
    a.iter().map(|v| v / n).collect()
}

/// Gram matrix `FᵀF` of the columns of `f`.
pub fn gram(f: &Matrix) -> Result<Matrix> {
    if f.rows == 0 || f.cols == 0 {
        return Err(invalid("gram of an empty matrix"));
    }
    let n = f.cols;
    let mut g = Matrix::zeros(n, n);
    for i in 0..f.rows {
        let row = f.row(i);
        for a in 0..n {
            let ra = row[a];
            if ra == 0.0 {
                continue;
            }
            let g_row = &mut g.data[a * n..(a + 1) * n];
            for b in a..n {
                g_row[b] += ra * row[b];
            }
        }
    }
    for a in 0..n {
        for b in 0..a {
            g.data[a * n + b] = g.data[b * n + a];
        }
    }
    Ok(g)
}

/// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn jacobi_eigenvalues(s: &Matrix) -> Result<Vec<f64>> {
    Ok(jacobi_eigen(s, false)?.0)
}

/// Eigen-decomposition by cyclic Jacobi. Returns ascending eigenvalues and, when
/// requested, the matching orthonormal eigenvectors as the columns of a matrix.
pub fn jacobi_eigen(s: &Matrix, with_vectors: bool) -> Result<(Vec<f64>, Option<Matrix>)> {
    if !s.is_symmetric(SYMMETRY_TOL) {
        return Err(invalid("jacobi: matrix is not symmetric"));
    }
    let n = s.rows;
    let mut a = s.data.clone();
    let mut v = with_vectors.then(|| Matrix::identity(n).data);
    let scale = s.frobenius_norm();
    const MAX_SWEEPS: usize = 100;
    let mut converged = n <= 1 || scale == 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= f64::EPSILON * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                if let Some(v) = v.as_mut() {
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - sn * vkq;
                        v[k * n + q] = sn * vkp + c * vkq;
                    }
                }
            }
        }
    }
    if !converged {
        // One more check: the final sweep may have finished the job.
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].abs())
            .fold(0.0, f64::max);
        if off > 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return Err(GrwError::NoConvergence(format!(
                "jacobi did not converge in {MAX_SWEEPS} sweeps"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = v.map(|v| {
        let mut m = Matrix::zeros(n, n);
        for (new_j, &old_j) in order.iter().enumerate() {
            for k in 0..n {
                m.data[k * n + new_j] = v[k * n + old_j];
            }
        }
        m
    });
    Ok((values, vectors))
}

/// Largest and smallest eigenvalue of a symmetric matrix.
///
/// Jacobi diagonalization up to [`JACOBI_MAX_DIM`], shifted power iteration
/// (capped at [`POWER_ITERATION_CAP`] iterations per end) above it.
pub fn extreme_eigenvalues(s: &Matrix, tol: f64) -> Result<(f64, f64)> {
    if !s.is_square() || s.rows == 0 {
        return Err(invalid(
            "extreme_eigenvalues needs a non-empty square matrix",
        ));
    }
    if !s.is_symmetric(SYMMETRY_TOL) {
        return Err(invalid("extreme_eigenvalues: matrix is not symmetric"));
    }
    if s.rows <= JACOBI_MAX_DIM {
        let ev = jacobi_eigenvalues(s)?;
        return Ok((ev[ev.len() - 1], ev[0]));
    }
    // Gershgorin bounds give shifts that make the target end dominant.
    let n = s.rows;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        let radius: f64 = (0..n).filter(|&j| j != i).map(|j| s.get(i, j).abs()).sum();
        lo = lo.min(s.get(i, i) - radius);
        hi = hi.max(s.get(i, i) + radius);
    }
    let top = dominant_eigenvalue(s, -lo, 1.0, tol)? + lo;
    let bottom = hi - dominant_eigenvalue(s, hi, -1.0, tol)?;
    Ok((top.max(bottom), bottom.min(top)))
}

/// Dominant eigenvalue of `shift·I + sign·S`, which must be PSD.
fn dominant_eigenvalue(s: &Matrix, shift: f64, sign: f64, tol: f64) -> Result<f64> {
    let n = s.rows;
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + ((i as f64) * 0.618_033_988_749_895).fract())
        .collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let apply = |v: &[f64]| -> Vec<f64> {
        let sv = s.matvec(v).expect("square");
        sv.iter()
            .zip(v)
            .map(|(a, b)| sign * a + shift * b)
            .collect()
    };
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATION_CAP {
        let w = apply(&v);
        let rq = dot(&v, &w);
        let resid = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - rq * b).powi(2))
            .sum::<f64>()
            .sqrt();
        let nw = norm(&w);
        if nw == 0.0 {
            return Ok(0.0);
        }
        let done = resid <= tol || (rq - lambda).abs() <= 1e-3 * tol;
        lambda = rq;
        if done {
            return Ok(lambda);
        }
        v = w.into_iter().map(|x| x / nw).collect();
    }
    Err(GrwError::NoConvergence(format!(
        "power iteration exceeded {POWER_ITERATION_CAP} iterations"
    )))
}

/// Cholesky factor `L` with `A = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(invalid("cholesky needs a square matrix"));
        }
        let n = a.rows;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) {
                return Err(GrwError::NotPositiveDefinite { pivot: j, value: d });
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in j + 1..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / d;
            }
        }
        Ok(Self { n, l })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        if b.len() != n {
            return Err(invalid("cholesky solve: dimension mismatch"));
        }
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= self.l[i * n + k] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                y[i] -= self.l[k * n + i] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        Ok(y)
    }
}

/// Solves `A x = b` for symmetric positive-definite `A`.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if a.rows != b.len() {
        return Err(invalid("solve_spd: dimension mismatch"));
    }
    Cholesky::factor(a)?.solve(b)
}

/// Solves a general square system by LU with partial pivoting.
pub fn solve_general(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if !a.is_square() || a.rows != b.len() {
        return Err(invalid("solve_general: dimension mismatch"));
    }
    let n = a.rows;
    let mut m = a.data.clone();
    let mut x = b.to_vec();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .expect("non-empty range");
        if m[pivot * n + col].abs() <= 1e-14 * scale {
            return Err(GrwError::RankDeficient {
                lambda_min: m[pivot * n + col].abs(),
                lambda_max: scale,
            });
        }
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
            x.swap(col, pivot);
        }
        let p = m[col * n + col];
        for i in col + 1..n {
            let f = m[i * n + col] / p;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[i * n + k] -= f * m[col * n + k];
            }
            x[i] -= f * x[col];
        }
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            x[i] -= m[i * n + k] * x[k];
        }
        x[i] /= m[i * n + i];
    }
    Ok(x)
}

/// Gram matrix of `x` after checking its columns are linearly independent.
pub fn full_rank_gram(x: &Matrix) -> Result<Matrix> {
    let g = gram(x)?;
    let (lambda_max, lambda_min) = extreme_eigenvalues(&g, 1e-12 * g.max_abs().max(1e-300))?;
    if !(lambda_min >= RANK_TOL * lambda_max) || lambda_max <= 0.0 {
        return Err(GrwError::RankDeficient {
            lambda_min,
            lambda_max,
        });
    }
    Ok(g)
}

/// The unique `θ̃ ∈ span{columns of X}` with `Xᵀθ̃ = r`, i.e. `X·(XᵀX)⁻¹·r`.
pub fn min_norm_span_solve(x: &Matrix, r: &[f64]) -> Result<Vec<f64>> {
    if r.len() != x.cols {
        return Err(invalid(
            "min_norm_span_solve: r must have one entry per column",
        ));
    }
    let g = full_rank_gram(x)?;
    let coeffs = solve_spd(&g, r)?;
    x.matvec(&coeffs)
}

/// Orthogonal projection of `v` onto the column span of `x`.
pub fn project_onto_span(v: &[f64], x: &Matrix) -> Result<Vec<f64>> {
    if v.len() != x.rows {
        return Err(invalid("project_onto_span: dimension mismatch"));
    }
    let g = full_rank_gram(x)?;
    let coeffs = solve_spd(&g, &x.tr_matvec(v)?)?;
    x.matvec(&coeffs)
}

/// Distance from `v` to the column span of `x`.
pub fn span_residual(v: &[f64], x: &Matrix) -> Result<f64> {
    let p = project_onto_span(v, x)?;
    Ok(distance(v, &p))
}
