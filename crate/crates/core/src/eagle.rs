//! Centralized EAGLE: the four-block update, step-size policies, stopping
//! rule, the `W`-estimation variant and per-iteration spectral diagnostics.

use std::time::Instant;

use thiserror::Error;

use crate::matcore::{least_squares_min_norm, power_iteration_warm, small_gram_eig, sym_eig, Mat, MatError, POWER_MAX_ITER, POWER_TOL};
use crate::problemgen::BlockProblem;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EagleError {
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error("non-finite entry in block {block} after step {iter}")]
    NonFinite { block: &'static str, iter: usize },
    #[error("run was not recorded with explicit N matrices")]
    DiagnosticsDisabled,
    #[error("explicit N matrices need d <= {max}, got {d}")]
    TooLargeForDiagnostics { d: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhoPolicy {
    /// `rho = 1 / ||A_l||_2^2` by power iteration.
    ExactNorm,
    /// Normalize `||A_0||_2 = 1` once, keep `rho = 1`, rescale `(A, B)` by 3/2 after each step.
    AnalyticRescale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub eta: f64,
    pub gamma: f64,
    pub rho_policy: RhoPolicy,
    pub stop_tau: f64,
    pub max_iter: usize,
    /// Eigen-decompose `E_l` every iteration.
    pub track_diagnostics: bool,
    /// Compute the direct oracle once and record the error to it.
    pub track_error: bool,
    /// Keep `D_l` and the explicit product `N_l` for every iteration.
    pub track_n_matrix: bool,
    pub power_tol: f64,
    pub power_max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eta: 1.0 / 3.0,
            gamma: 1.0,
            rho_policy: RhoPolicy::ExactNorm,
            stop_tau: 1e-12,
            max_iter: 200,
            track_diagnostics: false,
            track_error: true,
            track_n_matrix: false,
            power_tol: POWER_TOL,
            power_max_iter: POWER_MAX_ITER,
        }
    }
}

impl SolverConfig {
    /// `eta = 1`, `gamma = 1.9`, the constants a trained model settles on.
    /// Stalls between 1e-9 and 1e-7 on kappa = 1e2 problems.
    pub fn learned() -> Self {
        Self { eta: 1.0, gamma: 1.9, ..Self::default() }
    }

    pub fn with_diagnostics(mut self) -> Self {
        self.track_diagnostics = true;
        self
    }
}

/// Largest `d` for which explicit `N_l` products are kept.
pub const N_MATRIX_MAX_D: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct IterState {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
    pub l: usize,
    /// `rho` used for the most recent step (1 before any step in rescale mode).
    pub rho: f64,
    /// Product of all scalings applied to `(A, B)` so far.
    pub scale_accum: f64,
    /// Dominant direction of `E` from the last power iteration; warm start for the next.
    pub power_start: Option<Vec<f64>>,
}

impl IterState {
    /// Initial state `(A, B, C, 0)`; in rescale mode `(A, B)` are divided by `||A||_2`,
    /// taken from a dense eigensolve of the smaller Gram matrix.
    pub fn new(p: &BlockProblem, cfg: &SolverConfig) -> Result<Self, EagleError> {
        Self::from_blocks(&p.a, &p.b, &p.c, cfg)
    }

    pub fn from_blocks(a: &Mat, b: &Mat, c: &Mat, cfg: &SolverConfig) -> Result<Self, EagleError> {
        let d0 = Mat::zeros(b.rows(), c.cols());
        let mut s = Self { a: a.clone(), b: b.clone(), c: c.clone(), d: d0, l: 0, rho: 1.0, scale_accum: 1.0, power_start: None };
        if cfg.rho_policy == RhoPolicy::AnalyticRescale {
            let lam = small_gram_eig(a)?.top();
            if lam <= 0.0 {
                return Err(MatError::ZeroMatrix.into());
            }
            let f = 1.0 / lam.sqrt();
            s.a = s.a.scale(f);
            s.b = s.b.scale(f);
            s.scale_accum = f;
        }
        Ok(s)
    }
}

/// `rho_l` for the current state.
pub fn rho(state: &IterState, cfg: &SolverConfig) -> Result<f64, EagleError> {
    Ok(rho_estimate(state, cfg)?.0)
}

/// `rho_l` and, in exact-norm mode, the dominant direction it was measured along.
///
/// The power iteration is also seeded from `state.power_start` when present:
/// every `E_l` is a polynomial in `E_0`, so the previous dominant direction
/// remains an eigenvector.
pub fn rho_estimate(state: &IterState, cfg: &SolverConfig) -> Result<(f64, Option<Vec<f64>>), EagleError> {
    match cfg.rho_policy {
        RhoPolicy::ExactNorm => {
            let est = power_iteration_warm(&state.a, state.power_start.as_deref(), cfg.power_tol, cfg.power_max_iter)?;
            Ok((1.0 / est.value, Some(est.vector)))
        }
        RhoPolicy::AnalyticRescale => {
            if state.a.frobenius_sq() == 0.0 {
                return Err(MatError::ZeroMatrix.into());
            }
            Ok((1.0, None))
        }
    }
}

/// Flops of one centralized update on blocks of these shapes (excluding `rho`).
pub fn central_step_flops(d: usize, n: usize, dp: usize, np: usize) -> u64 {
    let (d, n, dp, np) = (d as u64, n as u64, dp as u64, np as u64);
    let updates = 2 * (d * n + dp * n + d * np + dp * np);
    if d <= n {
        // E = AA^T (symmetric), V = BA^T, EA, VA, EC, VC.
        d * (d + 1) * n + 2 * dp * d * n + 2 * d * d * n + 2 * dp * d * n + 2 * d * d * np + 2 * dp * d * np + updates
    } else {
        // G = A^T A, AG, BG, A^T C, A(A^T C), B(A^T C).
        n * (n + 1) * d + 2 * d * n * n + 2 * dp * n * n + 2 * d * n * np + 2 * d * n * np + 2 * dp * n * np + updates
    }
}

/// One update with the given `eta_l = eta * rho` and `gamma_l = gamma * rho`.
/// All four blocks read the pre-step state.
pub fn update_blocks(a: &Mat, b: &Mat, c: &Mat, d: &Mat, eta_l: f64, gamma_l: f64) -> (Mat, Mat, Mat, Mat) {
    let (dd, n) = a.shape();
    let (mut a1, mut b1, mut c1, mut d1) = (a.clone(), b.clone(), c.clone(), d.clone());
    if dd <= n {
        let e = a.gram_rows();
        let v = b.matmul_t(a);
        a1.axpy(-eta_l, &e.matmul(a));
        b1.axpy(-eta_l, &v.matmul(a));
        c1.axpy(-gamma_l, &e.matmul(c));
        d1.axpy(gamma_l, &v.matmul(c));
    } else {
        let g = a.t_matmul(a);
        let atc = a.t_matmul(c);
        a1.axpy(-eta_l, &a.matmul(&g));
        b1.axpy(-eta_l, &b.matmul(&g));
        c1.axpy(-gamma_l, &a.matmul(&atc));
        d1.axpy(gamma_l, &b.matmul(&atc));
    }
    (a1, b1, c1, d1)
}

fn check_finite(state: &IterState) -> Result<(), EagleError> {
    for (name, m) in [("A", &state.a), ("B", &state.b), ("C", &state.c), ("D", &state.d)] {
        if !m.is_finite() {
            return Err(EagleError::NonFinite { block: name, iter: state.l });
        }
    }
    Ok(())
}

/// One step with an externally supplied `rho`.
pub fn step_with_rho(state: &IterState, rho_l: f64, cfg: &SolverConfig) -> Result<IterState, EagleError> {
    let (mut a, mut b, c, d) = update_blocks(&state.a, &state.b, &state.c, &state.d, cfg.eta * rho_l, cfg.gamma * rho_l);
    let mut scale_accum = state.scale_accum;
    if cfg.rho_policy == RhoPolicy::AnalyticRescale {
        a = a.scale(1.5);
        b = b.scale(1.5);
        scale_accum *= 1.5;
    }
    let next = IterState { a, b, c, d, l: state.l + 1, rho: rho_l, scale_accum, power_start: state.power_start.clone() };
    check_finite(&next)?;
    Ok(next)
}

pub fn step(state: &IterState, cfg: &SolverConfig) -> Result<IterState, EagleError> {
    let (r, dir) = rho_estimate(state, cfg)?;
    let mut next = step_with_rho(state, r, cfg)?;
    next.power_start = dir;
    Ok(next)
}

/// Spectral summary of `E = A A^T`, using the first `rank` eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spectrum {
    pub lambda_bar: f64,
    pub lambda_lo: f64,
    pub kappa: f64,
    pub theta: f64,
}

impl Spectrum {
    pub fn of(e: &Mat, rank: usize) -> Result<Self, EagleError> {
        let eig = sym_eig(e)?;
        Ok(Self::from_values(&eig.values, rank))
    }

    pub fn from_values(values: &[f64], rank: usize) -> Self {
        let lambda_bar = values[0];
        let lambda_lo = values[rank.max(1) - 1];
        let kappa = lambda_bar / lambda_lo;
        Self { lambda_bar, lambda_lo, kappa, theta: kappa - 1.0 }
    }
}

/// One trace row: the state after `iter` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    /// Relative Frobenius error of `D_l` against the direct oracle.
    pub err_oracle: Option<f64>,
    /// Relative Frobenius error of `D_l` against the withheld block.
    pub err_truth: f64,
    pub spectrum: Option<Spectrum>,
    /// `rho` used by the step leaving this state.
    pub rho: Option<f64>,
    pub wall_ns: u64,
    pub flops: u64,
    pub comm_floats_cum: u64,
}

#[derive(Debug, Clone)]
pub struct Oracle {
    pub w_star: Mat,
    pub d_star: Mat,
}

impl Oracle {
    pub fn new(a: &Mat, b: &Mat, c: &Mat) -> Self {
        let w_star = least_squares_min_norm(a, b);
        let d_star = w_star.matmul(c);
        Self { w_star, d_star }
    }

    pub fn rel_err(&self, d: &Mat) -> f64 {
        rel_diff(d, &self.d_star)
    }
}

pub fn rel_diff(x: &Mat, reference: &Mat) -> f64 {
    let den = reference.frobenius();
    let num = x.sub(reference).frobenius();
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Converged,
    MaxIterExceeded,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub rows: Vec<IterRecord>,
    pub oracle: Option<Oracle>,
    pub c0: Option<Mat>,
    /// `D_l` per row, when explicit N matrices were requested.
    pub d_hist: Vec<Mat>,
    /// `N_l` per row, when requested.
    pub n_hist: Vec<Mat>,
    /// Projector onto the kernel of `E_0`, when requested.
    pub kernel_proj: Option<Mat>,
}

impl Trace {
    pub fn errors(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.err_oracle).collect()
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.spectrum.map(|s| s.theta)).collect()
    }

    /// First iteration whose oracle error is at or below `eps`.
    pub fn iterations_to(&self, eps: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.err_oracle.is_some_and(|e| e <= eps)).map(|r| r.iter)
    }

    /// First iteration whose error against the withheld block is at or below `eps`.
    pub fn iterations_to_truth(&self, eps: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.err_truth <= eps).map(|r| r.iter)
    }
}

#[derive(Debug, Clone)]
pub struct CentralRun {
    pub d: Mat,
    pub trace: Trace,
    pub status: RunStatus,
    pub iterations: usize,
    pub final_state: IterState,
}

/// Relative `D` increment used by the stopping rule.
pub fn d_increment(d_new: &Mat, d_old: &Mat) -> f64 {
    d_new.sub(d_old).frobenius() / d_new.frobenius().max(1.0)
}

pub fn run_centralized(p: &BlockProblem, cfg: &SolverConfig) -> Result<CentralRun, EagleError> {
    let mut state = IterState::new(p, cfg)?;
    let (d, n, dp, np) = (p.d(), p.n(), p.d_prime(), p.n_prime());
    let mut trace = Trace { c0: Some(p.c.clone()), ..Trace::default() };
    if cfg.track_error {
        trace.oracle = Some(Oracle::new(&p.a, &p.b, &p.c));
    }
    let e0 = state.a.gram_rows();
    let rank0 = if cfg.track_diagnostics || cfg.track_n_matrix { sym_eig(&e0)?.rank() } else { 0 };
    let mut n_mat = None;
    if cfg.track_n_matrix {
        if d > N_MATRIX_MAX_D {
            return Err(EagleError::TooLargeForDiagnostics { d, max: N_MATRIX_MAX_D });
        }
        let eig = sym_eig(&e0)?;
        let k = eig.kernel_basis();
        trace.kernel_proj = Some(k.matmul_t(&k));
        n_mat = Some(Mat::identity(d));
    }
    let flops_per = central_step_flops(d, n, dp, np);
    let record = |state: &IterState, trace: &mut Trace, wall: u64, flops: u64, e: Option<&Mat>| -> Result<(), EagleError> {
        let spectrum = if cfg.track_diagnostics {
            let e = match e {
                Some(e) => e.clone(),
                None => state.a.gram_rows(),
            };
            Some(Spectrum::of(&e, rank0)?)
        } else {
            None
        };
        trace.rows.push(IterRecord {
            iter: state.l,
            err_oracle: trace.oracle.as_ref().map(|o| o.rel_err(&state.d)),
            err_truth: rel_diff(&state.d, &p.d_hidden),
            spectrum,
            rho: None,
            wall_ns: wall,
            flops,
            comm_floats_cum: 0,
        });
        Ok(())
    };
    record(&state, &mut trace, 0, 0, Some(&e0))?;
    if let Some(nm) = &n_mat {
        trace.d_hist.push(state.d.clone());
        trace.n_hist.push(nm.clone());
    }
    let mut status = RunStatus::MaxIterExceeded;
    let mut wall_total = 0u64;
    let mut flops_total = 0u64;
    while state.l < cfg.max_iter {
        let t0 = Instant::now();
        let (r, dir) = rho_estimate(&state, cfg)?;
        let mut next = step_with_rho(&state, r, cfg)?;
        next.power_start = dir;
        let dt = t0.elapsed().as_nanos() as u64;
        wall_total += dt;
        flops_total += flops_per;
        if let Some(row) = trace.rows.last_mut() {
            row.rho = Some(r);
        }
        if let Some(nm) = n_mat.as_mut() {
            let e = state.a.gram_rows();
            let mut f = Mat::identity(d);
            f.axpy(-cfg.gamma * r, &e);
            *nm = f.matmul(nm);
        }
        let inc = d_increment(&next.d, &state.d);
        state = next;
        record(&state, &mut trace, wall_total, flops_total, None)?;
        if let Some(nm) = &n_mat {
            trace.d_hist.push(state.d.clone());
            trace.n_hist.push(nm.clone());
        }
        if inc < cfg.stop_tau {
            status = RunStatus::Converged;
            break;
        }
    }
    Ok(CentralRun { d: state.d.clone(), iterations: state.l, trace, status, final_state: state })
}

/// Per-iteration telescoping residual `||D_l - W*(I - N_l) C_0||_F / ||D*||_F`.
///
/// With `projected`, `N_l` is replaced by `(I - P_0) N_l` where `P_0`
/// projects onto the kernel of `E_0`.
pub fn n_matrix_trace(trace: &Trace, projected: bool) -> Result<Vec<f64>, EagleError> {
    if trace.n_hist.is_empty() {
        return Err(EagleError::DiagnosticsDisabled);
    }
    let oracle = trace.oracle.as_ref().ok_or(EagleError::DiagnosticsDisabled)?;
    let c0 = trace.c0.as_ref().ok_or(EagleError::DiagnosticsDisabled)?;
    let scale = oracle.d_star.frobenius().max(f64::MIN_POSITIVE);
    let d = c0.rows();
    let mut out = Vec::with_capacity(trace.n_hist.len());
    for (nl, dl) in trace.n_hist.iter().zip(&trace.d_hist) {
        let nl = if projected {
            let p0 = trace.kernel_proj.as_ref().ok_or(EagleError::DiagnosticsDisabled)?;
            let mut ip = Mat::identity(d);
            ip.axpy(-1.0, p0);
            ip.matmul(nl)
        } else {
            nl.clone()
        };
        let mut i_minus = Mat::identity(d);
        i_minus.axpy(-1.0, &nl);
        let predicted = oracle.w_star.matmul(&i_minus.matmul(c0));
        out.push(dl.sub(&predicted).frobenius() / scale);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimConfig {
    pub eta: f64,
    pub gamma: f64,
    /// `rho_l = 1 / (rho_divisor * ||A_l||_2^2)`.
    pub rho_divisor: f64,
    pub stop_tau: f64,
    pub max_iter: usize,
    pub power_tol: f64,
    pub power_max_iter: usize,
}

impl Default for EstimConfig {
    fn default() -> Self {
        Self { eta: 1.0, gamma: 3.0, rho_divisor: 3.0, stop_tau: 1e-12, max_iter: 200, power_tol: POWER_TOL, power_max_iter: POWER_MAX_ITER }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimState {
    pub a: Mat,
    pub b: Mat,
    pub w: Mat,
    pub l: usize,
    /// Warm start for the next power iteration, as in [`IterState`].
    pub power_start: Option<Vec<f64>>,
}

impl EstimState {
    pub fn new(a: &Mat, b: &Mat) -> Self {
        Self { a: a.clone(), b: b.clone(), w: Mat::zeros(b.rows(), a.rows()), l: 0, power_start: None }
    }
}

/// `W+ = W - gamma rho (W A_l - B_l) A_l^T`, with `(A, B)` updated as in [`step`].
pub fn estim_step(state: &EstimState, cfg: &EstimConfig) -> Result<EstimState, EagleError> {
    let est = power_iteration_warm(&state.a, state.power_start.as_deref(), cfg.power_tol, cfg.power_max_iter)?;
    let r = 1.0 / (cfg.rho_divisor * est.value);
    let e = state.a.gram_rows();
    let v = state.b.matmul_t(&state.a);
    let mut a = state.a.clone();
    let mut b = state.b.clone();
    let mut w = state.w.clone();
    a.axpy(-cfg.eta * r, &e.matmul(&state.a));
    b.axpy(-cfg.eta * r, &v.matmul(&state.a));
    let resid = state.w.matmul(&e).sub(&v);
    w.axpy(-cfg.gamma * r, &resid);
    let next = EstimState { a, b, w, l: state.l + 1, power_start: Some(est.vector) };
    if !next.w.is_finite() || !next.a.is_finite() {
        return Err(EagleError::NonFinite { block: "W", iter: next.l });
    }
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct EstimRun {
    pub w: Mat,
    pub status: RunStatus,
    pub iterations: usize,
    /// Relative error of `W_l` against the min-norm solution, per iteration.
    pub errors: Vec<f64>,
}

pub fn run_estimation(a: &Mat, b: &Mat, cfg: &EstimConfig) -> Result<EstimRun, EagleError> {
    let w_star = least_squares_min_norm(a, b);
    let mut state = EstimState::new(a, b);
    let mut errors = vec![rel_diff(&state.w, &w_star)];
    let mut status = RunStatus::MaxIterExceeded;
    while state.l < cfg.max_iter {
        let next = estim_step(&state, cfg)?;
        let inc = d_increment(&next.w, &state.w);
        state = next;
        errors.push(rel_diff(&state.w, &w_star));
        if inc < cfg.stop_tau {
            status = RunStatus::Converged;
            break;
        }
    }
    Ok(EstimRun { w: state.w, status, iterations: state.l, errors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::orthonormal_columns;
    use crate::problemgen::{generate, GenSpec};
    use crate::rng::Stream;

    fn gauss(r: usize, c: usize, seed: u64) -> Mat {
        let mut s = Stream::new(seed, "eagle-test");
        Mat::from_fn(r, c, |_, _| s.gaussian())
    }

    /// `d x n` with orthonormal rows.
    fn orthonormal_rows(d: usize, n: usize, seed: u64) -> Mat {
        orthonormal_columns(&gauss(n, d, seed)).unwrap().transpose()
    }

    #[test]
    fn rho_is_one_for_orthonormal_rows() {
        let a = orthonormal_rows(4, 7, 1);
        let p = BlockProblem::from_blocks(a, gauss(2, 7, 2), gauss(4, 2, 3), Mat::zeros(2, 2));
        let cfg = SolverConfig::default();
        let s = IterState::new(&p, &cfg).unwrap();
        assert!((rho(&s, &cfg).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rho_grows_by_nine_fourths() {
        let p = generate(&GenSpec::svd(10, 12, 2, 2, 10, 30.0), 4).unwrap();
        let cfg = SolverConfig::default();
        let s0 = IterState::new(&p, &cfg).unwrap();
        let r0 = rho(&s0, &cfg).unwrap();
        let s1 = step(&s0, &cfg).unwrap();
        let r1 = rho(&s1, &cfg).unwrap();
        assert!((r1 / r0 - 9.0 / 4.0).abs() < 1e-6, "{}", r1 / r0);
    }

    #[test]
    fn analytic_rescale_keeps_unit_norm() {
        let p = generate(&GenSpec::svd(12, 12, 2, 2, 12, 50.0), 5).unwrap();
        let cfg = SolverConfig { rho_policy: RhoPolicy::AnalyticRescale, ..SolverConfig::default() };
        let mut s = IterState::new(&p, &cfg).unwrap();
        for _ in 0..12 {
            let lam = sym_eig(&s.a.gram_rows()).unwrap().top();
            assert!((lam - 1.0).abs() < 1e-8, "lambda {lam}");
            s = step(&s, &cfg).unwrap();
        }
    }

    #[test]
    fn one_step_on_orthonormal_rows() {
        let a = orthonormal_rows(3, 5, 6);
        let b = gauss(2, 5, 7);
        let c = gauss(3, 2, 8);
        let p = BlockProblem::from_blocks(a.clone(), b.clone(), c.clone(), Mat::zeros(2, 2));
        let cfg = SolverConfig::default();
        let s1 = step(&IterState::new(&p, &cfg).unwrap(), &cfg).unwrap();
        assert!(s1.a.sub(&a.scale(2.0 / 3.0)).max_abs() < 1e-12);
        let bac = b.matmul_t(&a).matmul(&c);
        assert!(s1.d.sub(&bac).max_abs() < 1e-12);
        // kappa = 1: one step lands on the oracle.
        let o = Oracle::new(&a, &b, &c);
        assert!(o.rel_err(&s1.d) < 1e-12);
    }

    #[test]
    fn step_matches_scalar_recurrence() {
        let a = Mat::diag(&[1.0, 0.5]);
        let b = gauss(1, 2, 9);
        let c = gauss(2, 1, 10);
        let p = BlockProblem::from_blocks(a, b.clone(), c.clone(), Mat::zeros(1, 1));
        let cfg = SolverConfig::default();
        let mut s = IterState::new(&p, &cfg).unwrap();
        let mut sig = [1.0f64, 0.5];
        let mut bb = [b.get(0, 0), b.get(0, 1)];
        let mut cc = [c.get(0, 0), c.get(1, 0)];
        let mut dd = 0.0;
        for _ in 0..6 {
            let r = rho(&s, &cfg).unwrap();
            dd += r * (bb[0] * sig[0] * cc[0] + bb[1] * sig[1] * cc[1]);
            for i in 0..2 {
                let f = 1.0 - r * sig[i] * sig[i] / 3.0;
                cc[i] *= 1.0 - r * sig[i] * sig[i];
                bb[i] *= f;
                sig[i] *= f;
            }
            s = step(&s, &cfg).unwrap();
            assert!((s.a.get(0, 0) - sig[0]).abs() < 1e-12);
            assert!((s.a.get(1, 1) - sig[1]).abs() < 1e-12);
            assert!((s.d.get(0, 0) - dd).abs() < 1e-12 * dd.abs().max(1.0));
        }
    }

    #[test]
    fn kappa_one_converges_in_one_iteration() {
        let a = orthonormal_rows(6, 6, 11).scale(2.5);
        let w0 = gauss(2, 6, 12);
        let c = gauss(6, 2, 13);
        let p = BlockProblem::from_blocks(a.clone(), w0.matmul(&a), c.clone(), w0.matmul(&c));
        let run = run_centralized(&p, &SolverConfig::default()).unwrap();
        assert_eq!(run.status, RunStatus::Converged);
        assert_eq!(run.trace.iterations_to(1e-12), Some(1));
    }

    #[test]
    fn oracle_agreement_at_moderate_kappa() {
        let p = generate(&GenSpec::svd(64, 64, 2, 2, 64, 1e2), 21).unwrap();
        let run = run_centralized(&p, &SolverConfig::default()).unwrap();
        assert_eq!(run.status, RunStatus::Converged);
        let it = run.trace.iterations_to(1e-10).expect("reached 1e-10");
        assert!(it <= 40, "{it}");
    }

    #[test]
    fn telescoping_residual_small() {
        let p = generate(&GenSpec::svd(16, 20, 2, 3, 16, 50.0), 22).unwrap();
        let cfg = SolverConfig { track_n_matrix: true, ..SolverConfig::default() };
        let run = run_centralized(&p, &cfg).unwrap();
        let res = n_matrix_trace(&run.trace, false).unwrap();
        assert_eq!(res[0], 0.0);
        assert!(res.iter().all(|r| *r <= 1e-10), "{res:?}");
        let plain = run_centralized(&p, &SolverConfig::default()).unwrap();
        assert!(matches!(n_matrix_trace(&plain.trace, false), Err(EagleError::DiagnosticsDisabled)));
    }

    #[test]
    fn estimation_one_step_and_convergence() {
        let a = orthonormal_rows(4, 6, 30);
        let b = gauss(2, 6, 31);
        let s1 = estim_step(&EstimState::new(&a, &b), &EstimConfig::default()).unwrap();
        assert!(s1.w.sub(&b.matmul_t(&a)).max_abs() < 1e-12);

        let p = generate(&GenSpec::svd(64, 64, 2, 2, 64, 1e2), 32).unwrap();
        let run = run_estimation(&p.a, &p.b, &EstimConfig::default()).unwrap();
        assert!(*run.errors.last().unwrap() <= 1e-10, "{:?}", run.errors.last());
    }

    #[test]
    fn scale_equivariance_is_exact_for_powers_of_two() {
        let p = generate(&GenSpec::svd(10, 12, 2, 2, 10, 20.0), 40).unwrap();
        let cfg = SolverConfig { max_iter: 8, stop_tau: 0.0, track_error: false, ..SolverConfig::default() };
        let mut s1 = IterState::new(&p, &cfg).unwrap();
        let mut s4 = IterState::new(&p.scaled(4.0), &cfg).unwrap();
        for _ in 0..8 {
            s1 = step(&s1, &cfg).unwrap();
            s4 = step(&s4, &cfg).unwrap();
            assert_eq!(s4.d, s1.d.scale(4.0));
        }
    }

    #[test]
    fn learned_preset_reaches_1e_6() {
        let p = generate(&GenSpec::svd(64, 64, 2, 2, 64, 1e2), 0).unwrap();
        let run = run_centralized(&p, &SolverConfig::learned()).unwrap();
        assert!(run.trace.iterations_to(1e-6).is_some());
    }

    #[test]
    fn flop_count_routes() {
        assert_eq!(central_step_flops(2, 3, 1, 1), 2 * 3 * 3 + 2 * 2 * 3 + 2 * 4 * 3 + 2 * 2 * 3 + 2 * 4 + 2 * 2 + 2 * (6 + 3 + 2 + 1));
        assert!(central_step_flops(40, 10, 2, 2) < central_step_flops(40, 40, 2, 2));
    }
}
