//! Dense row-major matrices and the handful of factorizations the solvers need.
//!
//! Shape mismatches in products are programming errors and panic. Numerical
//! failure modes are reported through [`MatError`].

use std::fmt;

use thiserror::Error;

/// Unit roundoff used by the rank cutoffs, `2^-52`.
pub const EPS: f64 = f64::EPSILON;

pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITER: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatError {
    #[error("matrix is identically zero")]
    ZeroMatrix,
    #[error("power iteration did not reach tolerance in {iterations} steps (estimate {estimate})")]
    NonConvergence { estimate: f64, iterations: usize },
    #[error("matrix is not symmetric (relative asymmetry {asym:e})")]
    NotSymmetric { asym: f64 },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
}

#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{}", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            let row: Vec<String> = self.row(i).iter().take(8).map(|x| format!("{x:.4e}")).collect();
            writeln!(f, "  [{}]", row.join(", "))?;
        }
        Ok(())
    }
}

impl Mat {
    /// Checked constructor: rejects wrong lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatError> {
        if data.len() != rows * cols {
            return Err(MatError::BadLength { rows, cols, len: data.len() });
        }
        if let Some(k) = data.iter().position(|x| !x.is_finite()) {
            return Err(MatError::NonFinite { row: k / cols.max(1), col: k % cols.max(1) });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, MatError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let data: Vec<f64> = rows.iter().flat_map(|x| x.iter().copied()).collect();
        Self::new(r, c, data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|x| !x.is_finite())
            .map(|k| (k / self.cols, k % self.cols))
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let orow = &mut out.data[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_t shape mismatch");
        let (m, n) = (self.rows, other.rows);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let a = self.row(i);
            for j in 0..n {
                out.data[i * n + j] = dot(a, other.row(j));
            }
        }
        out
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "t_matmul shape mismatch");
        let (m, n) = (self.cols, other.cols);
        let mut out = Mat::zeros(m, n);
        for p in 0..self.rows {
            let arow = self.row(p);
            let brow = other.row(p);
            for (i, a) in arow.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * n..(i + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * self^T`, symmetric by construction.
    pub fn gram_rows(&self) -> Mat {
        let m = self.rows;
        let mut out = Mat::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let v = dot(self.row(i), self.row(j));
                out.data[i * m + j] = v;
                out.data[j * m + i] = v;
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len());
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn t_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, x.len());
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += xi * a;
            }
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    fn zip_with(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    /// Frobenius inner product `<self, other>`.
    pub fn inner(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape());
        dot(&self.data, &other.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Columns picked by index, in the given order (repeats allowed).
    pub fn select_cols(&self, idx: &[usize]) -> Mat {
        Mat::from_fn(self.rows, idx.len(), |i, j| self.get(i, idx[j]))
    }

    pub fn hcat(parts: &[&Mat]) -> Mat {
        let rows = parts.first().map_or(0, |p| p.rows);
        assert!(parts.iter().all(|p| p.rows == rows), "hcat row mismatch");
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for p in parts {
                out.data[i * cols + off..i * cols + off + p.cols].copy_from_slice(p.row(i));
                off += p.cols;
            }
        }
        out
    }

    pub fn vcat(parts: &[&Mat]) -> Mat {
        let cols = parts.first().map_or(0, |p| p.cols);
        assert!(parts.iter().all(|p| p.cols == cols), "vcat col mismatch");
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Mat { rows, cols, data }
    }

    /// Rows `r0..r1`, columns `c0..c1`.
    pub fn block(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Mat {
        Mat::from_fn(r1 - r0, c1 - c0, |i, j| self.get(r0 + i, c0 + j))
    }

    pub fn asymmetry(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let d = self.get(i, j) - self.get(j, i);
                s += d * d;
            }
        }
        s.sqrt()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Result of a power iteration on `A A^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Unit vector in `R^d` whose Rayleigh quotient on `A A^T` is `value`.
    pub vector: Vec<f64>,
}

/// Power iteration for `||A||_2^2`, returning the estimate even when the
/// tolerance was not met.
///
/// Start vector: normalized all-ones, then `e_1, e_2, ...` if it lies in the
/// kernel of `A^T`. Stops when the Rayleigh quotient changes by less than
/// `tol` relative.
pub fn power_iteration(a: &Mat, tol: f64, max_iter: usize) -> Result<PowerEstimate, MatError> {
    power_iteration_from(a, None, tol, max_iter)
}

/// [`power_iteration`] started from `start` when it is usable, falling back
/// to the default start vectors otherwise.
pub fn power_iteration_from(a: &Mat, start: Option<&[f64]>, tol: f64, max_iter: usize) -> Result<PowerEstimate, MatError> {
    if a.frobenius_sq() == 0.0 {
        return Err(MatError::ZeroMatrix);
    }
    let d = a.rows();
    let scale = a.max_abs();
    let floor = (EPS * scale).powi(2) * (a.cols() as f64);
    let mut w = match start {
        Some(v) if v.len() == d && norm2(v) > 0.0 => {
            let nv = norm2(v);
            v.iter().map(|x| x / nv).collect()
        }
        _ => vec![1.0 / (d as f64).sqrt(); d],
    };
    let mut u = a.t_matvec(&w);
    if dot(&u, &u) <= floor {
        w = vec![1.0 / (d as f64).sqrt(); d];
        u = a.t_matvec(&w);
    }
    let mut k = 0;
    while dot(&u, &u) <= floor {
        if k == d {
            return Err(MatError::ZeroMatrix);
        }
        w = vec![0.0; d];
        w[k] = 1.0;
        u = a.t_matvec(&w);
        k += 1;
    }
    let mut lambda = dot(&u, &u);
    let mut best = w.clone();
    for it in 1..=max_iter {
        let mut next_w = a.matvec(&u);
        let nw = norm2(&next_w);
        for x in &mut next_w {
            *x /= nw;
        }
        u = a.t_matvec(&next_w);
        let next = dot(&u, &u);
        let done = (next - lambda).abs() <= tol * next;
        if next >= lambda {
            lambda = next;
            best.clone_from(&next_w);
        }
        if done {
            return Ok(PowerEstimate { value: lambda, iterations: it, converged: true, vector: best });
        }
    }
    Ok(PowerEstimate { value: lambda, iterations: max_iter, converged: false, vector: best })
}

/// The larger of a default-start and a `start`-seeded [`power_iteration`].
///
/// Both Rayleigh quotients bound `||A||_2^2` from below, so the result is
/// never worse than the default start alone.
pub fn power_iteration_warm(a: &Mat, start: Option<&[f64]>, tol: f64, max_iter: usize) -> Result<PowerEstimate, MatError> {
    let cold = power_iteration(a, tol, max_iter)?;
    match start {
        Some(v) => {
            let warm = power_iteration_from(a, Some(v), tol, max_iter)?;
            Ok(if warm.value > cold.value { warm } else { cold })
        }
        None => Ok(cold),
    }
}

/// `||A||_2^2` by power iteration; `NonConvergence` carries the best estimate.
pub fn spectral_norm_sq(a: &Mat, tol: f64, max_iter: usize) -> Result<f64, MatError> {
    let est = power_iteration(a, tol, max_iter)?;
    if est.converged {
        Ok(est.value)
    } else {
        Err(MatError::NonConvergence { estimate: est.value, iterations: est.iterations })
    }
}

/// Rank threshold `max(rows, cols) * 2^-52 * top`.
pub fn rank_cutoff(rows: usize, cols: usize, top: f64) -> f64 {
    rows.max(cols) as f64 * EPS * top
}

#[derive(Debug, Clone)]
pub struct EigSym {
    /// Descending.
    pub values: Vec<f64>,
    /// Eigenvectors as columns, in the order of `values`.
    pub vectors: Mat,
    pub rank_cutoff: f64,
}

impl EigSym {
    pub fn rank(&self) -> usize {
        self.values.iter().filter(|v| **v > self.rank_cutoff).count()
    }

    pub fn top(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    /// Smallest eigenvalue above the rank cutoff.
    pub fn smallest_nonzero(&self) -> Option<f64> {
        self.values.iter().copied().filter(|v| *v > self.rank_cutoff).last()
    }

    /// Eigenvectors whose eigenvalues are at or below the cutoff.
    pub fn kernel_basis(&self) -> Mat {
        let idx: Vec<usize> = (self.rank()..self.values.len()).collect();
        self.vectors.select_cols(&idx)
    }

    pub fn reconstruct(&self) -> Mat {
        let n = self.values.len();
        let vl = Mat::from_fn(n, n, |i, j| self.vectors.get(i, j) * self.values[j]);
        vl.matmul_t(&self.vectors)
    }
}

/// Eigenvalues of the smaller of `A A^T` and `A^T A` (same nonzero spectrum).
pub fn small_gram_eig(a: &Mat) -> Result<EigSym, MatError> {
    if a.rows() <= a.cols() {
        sym_eig(&a.gram_rows())
    } else {
        sym_eig(&a.t_matmul(a))
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn sym_eig(e: &Mat) -> Result<EigSym, MatError> {
    assert_eq!(e.rows(), e.cols(), "sym_eig needs a square matrix");
    let n = e.rows();
    let fro = e.frobenius();
    let asym = e.asymmetry();
    if asym > 1e-10 * fro {
        return Err(MatError::NotSymmetric { asym: if fro > 0.0 { asym / fro } else { asym } });
    }
    let mut a = Mat::from_fn(n, n, |i, j| 0.5 * (e.get(i, j) + e.get(j, i)));
    let mut v = Mat::identity(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a.get(p, q).powi(2);
            }
        }
        if off.sqrt() <= 1e-300 || off.sqrt() <= EPS * 1e-3 * fro {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                if apq.abs() <= EPS * 1e-3 * (app.abs() * aqq.abs()).sqrt() {
                    a.set(p, q, 0.0);
                    a.set(q, p, 0.0);
                    continue;
                }
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let t = if tau == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));
    let values: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let vectors = v.select_cols(&order);
    let top = values.first().map_or(0.0, |x| x.abs());
    Ok(EigSym { values, vectors, rank_cutoff: rank_cutoff(n, n, top) })
}

/// Thin SVD of `a` (m x k) by one-sided Jacobi on its columns.
///
/// Returns `(u, sigma, v)` with `a = u diag(sigma) v^T`, `sigma` descending,
/// `u` m x k and `v` k x k. Columns of `u` belonging to zero singular values
/// are zero.
pub fn svd_jacobi(a: &Mat) -> (Mat, Vec<f64>, Mat) {
    let (m, k) = a.shape();
    // Work on columns stored contiguously.
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| a.col(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut e = vec![0.0; k];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = EPS * (m.max(k) as f64).sqrt();
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                let (lo, hi) = vcols.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = cols.iter().map(|c| norm2(c)).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let u = Mat::from_fn(m, k, |i, jj| {
        let j = order[jj];
        if norms[j] > 0.0 {
            cols[j][i] / norms[j]
        } else {
            0.0
        }
    });
    let v = Mat::from_fn(k, k, |i, jj| vcols[order[jj]][i]);
    (u, sigma, v)
}

/// Minimum-norm `W` minimizing `||W A - B||_F`, i.e. `W = B A^T (A A^T)^+`.
///
/// Computed from a one-sided Jacobi SVD of `A^T`; singular values at or below
/// `max(d, n) * 2^-52 * sigma_max` are treated as zero.
pub fn least_squares_min_norm(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols(), b.cols(), "least squares shape mismatch");
    let (d, n) = a.shape();
    // A^T = U S V^T with U n x d, V d x d, so A^+ = U S^-1 V^T.
    let (u, sigma, v) = svd_jacobi(&a.transpose());
    let top = sigma.first().copied().unwrap_or(0.0);
    let cut = rank_cutoff(d, n, top);
    let r = sigma.iter().filter(|s| **s > cut).count();
    let mut w = Mat::zeros(b.rows(), d);
    if r == 0 {
        return w;
    }
    let keep: Vec<usize> = (0..r).collect();
    let bu = b.matmul(&u.select_cols(&keep));
    let scaled = Mat::from_fn(bu.rows(), r, |i, j| bu.get(i, j) / sigma[j]);
    w = scaled.matmul_t(&v.select_cols(&keep));
    w
}

/// Orthonormal basis of the column span, by Householder QR with column pivoting.
///
/// A column is declared dependent once its remaining norm drops to
/// `max(rows, cols) * 2^-52` times the largest initial column norm.
pub fn orthonormal_columns(a: &Mat) -> Result<Mat, MatError> {
    let (m, k) = a.shape();
    if a.frobenius_sq() == 0.0 {
        return Err(MatError::ZeroMatrix);
    }
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| a.col(j)).collect();
    let top = cols.iter().map(|c| norm2(c)).fold(0.0, f64::max);
    let cut = rank_cutoff(m, k, top);
    let mut reflectors: Vec<Vec<f64>> = Vec::new();
    let steps = m.min(k);
    for s in 0..steps {
        // Pivot on the largest trailing norm.
        let (piv, pn) = (s..k)
            .map(|j| (j, norm2(&cols[j][s..])))
            .fold((s, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if pn <= cut {
            break;
        }
        cols.swap(s, piv);
        let x = &cols[s][s..];
        let alpha = if x[0] >= 0.0 { -pn } else { pn };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vn = norm2(&v);
        if vn == 0.0 {
            reflectors.push(vec![0.0; m - s]);
            continue;
        }
        for t in &mut v {
            *t /= vn;
        }
        for col in cols.iter_mut().skip(s) {
            let tail = &mut col[s..];
            let proj = 2.0 * dot(&v, tail);
            for (t, vi) in tail.iter_mut().zip(&v) {
                *t -= proj * vi;
            }
        }
        reflectors.push(v);
    }
    let r = reflectors.len();
    if r == 0 {
        return Err(MatError::ZeroMatrix);
    }
    let mut q = Mat::zeros(m, r);
    for j in 0..r {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        for (s, v) in reflectors.iter().enumerate().rev() {
            let tail = &mut e[s..];
            let proj = 2.0 * dot(v, tail);
            for (t, vi) in tail.iter_mut().zip(v) {
                *t -= proj * vi;
            }
        }
        for i in 0..m {
            q.set(i, j, e[i]);
        }
    }
    Ok(q)
}

/// Orthogonal projector `Q Q^T` onto the column span of `a`.
pub fn column_projector(a: &Mat) -> Result<Mat, MatError> {
    let q = orthonormal_columns(a)?;
    Ok(q.matmul_t(&q))
}
