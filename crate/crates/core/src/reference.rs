//! Direct Nyström oracle and the classical baselines: gradient descent
//! (centralized, distributed, stochastic) and conjugate gradient on
//! `X G = B A^T` with `G = A A^T`.

use std::time::Instant;

use thiserror::Error;

use crate::dist::{CommLedger, RoundMessage};
use crate::eagle::{d_increment, Oracle};
use crate::matcore::{power_iteration, sym_eig, Mat, MatError, EPS, POWER_MAX_ITER, POWER_TOL};
use crate::problemgen::Partition;
use crate::sketch::{sample_sketch, SketchError};

#[derive(Debug, Error)]
pub enum RefError {
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error("shape mismatch: {0}")]
    Shape(&'static str),
}

/// Ridge weight used by GD when `A` is rank-deficient.
pub const GD_RIDGE: f64 = 1e-3;

/// `W* = B A^T (A A^T)^+`, `D* = W* C`.
pub fn nystrom_solve(a: &Mat, b: &Mat, c: &Mat) -> Result<Oracle, RefError> {
    if a.frobenius_sq() == 0.0 {
        return Err(MatError::ZeroMatrix.into());
    }
    if a.cols() != b.cols() || a.rows() != c.rows() {
        return Err(RefError::Shape("nystrom_solve"));
    }
    Ok(Oracle::new(a, b, c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineStatus {
    Converged,
    /// Stopped on reaching the configured target error.
    ReachedTarget,
    MaxIterExceeded,
    /// `<P, P G>` not positive beyond roundoff at this iteration.
    Breakdown { iter: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineRow {
    pub iter: usize,
    pub err_oracle: f64,
    /// `1/2 ||X A - B||^2 + lambda/2 ||X||^2`; absent in distributed mode.
    pub objective: Option<f64>,
    pub wall_ns: u64,
    pub comm_floats_cum: u64,
    /// CG only: `<R_k, R_(k-1)> / ||R_(k-1)||^2` for the residuals around this step.
    pub resid_corr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BaselineTrace {
    pub rows: Vec<BaselineRow>,
    pub status: BaselineStatus,
    pub ridge: f64,
    pub oracle: Oracle,
    /// Per-round floats sent, distributed mode only.
    pub ledger: Option<CommLedger>,
}

impl BaselineTrace {
    pub fn iterations(&self) -> usize {
        self.rows.last().map_or(0, |r| r.iter)
    }

    pub fn iterations_to(&self, eps: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.err_oracle <= eps).map(|r| r.iter)
    }

    pub fn errors(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.err_oracle).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    /// Halt when the relative `X C` increment drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Halt once the oracle error reaches this value.
    pub target: Option<f64>,
    pub seed: u64,
    pub wall_clock: bool,
    /// Fixed number of power-iteration steps behind the GD step size;
    /// `None` runs the power iteration to its default tolerance.
    pub power_steps: Option<usize>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 100_000, target: None, seed: 0, wall_clock: true, power_steps: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GdMode {
    Central,
    /// One orthonormal column sketch of width `r` per iteration.
    Stochastic { r: usize },
}

fn ridge_for(a: &Mat) -> Result<f64, RefError> {
    let rank = sym_eig(&a.gram_rows())?.rank();
    Ok(if rank < a.rows() { GD_RIDGE } else { 0.0 })
}

fn sigma_max_sq(a: &Mat, cfg: &BaselineConfig) -> Result<f64, RefError> {
    let est = match cfg.power_steps {
        Some(k) => power_iteration(a, 0.0, k)?,
        None => power_iteration(a, POWER_TOL, POWER_MAX_ITER)?,
    };
    Ok(est.value)
}

fn objective(x: &Mat, a: &Mat, b: &Mat, lambda: f64) -> f64 {
    0.5 * x.matmul(a).sub(b).frobenius_sq() + 0.5 * lambda * x.frobenius_sq()
}

fn halt(cfg: &BaselineConfig, d_new: &Mat, d_old: &Mat, err: f64) -> Option<BaselineStatus> {
    if cfg.target.is_some_and(|t| err <= t) {
        Some(BaselineStatus::ReachedTarget)
    } else if d_increment(d_new, d_old) < cfg.tol {
        Some(BaselineStatus::Converged)
    } else {
        None
    }
}

/// Gradient descent on `1/2 ||X A - B||^2 (+ lambda/2 ||X||^2)` from `X = 0`.
///
/// Step `1 / sigma_max^2` (see [`BaselineConfig::power_steps`]); `lambda = 1e-3`
/// only when `A` is rank-deficient. Returns `D = X C`.
pub fn gd_run(a: &Mat, b: &Mat, c: &Mat, mode: GdMode, cfg: &BaselineConfig) -> Result<(Mat, BaselineTrace), RefError> {
    let oracle = nystrom_solve(a, b, c)?;
    let lambda = ridge_for(a)?;
    let (d, n) = a.shape();
    let mut x = Mat::zeros(b.rows(), d);
    let mut dk = Mat::zeros(b.rows(), c.cols());
    let mut rows = vec![BaselineRow {
        iter: 0,
        err_oracle: oracle.rel_err(&dk),
        objective: Some(objective(&x, a, b, lambda)),
        wall_ns: 0,
        comm_floats_cum: 0,
        resid_corr: None,
    }];
    let central = match mode {
        GdMode::Central => Some((a.gram_rows(), b.matmul_t(a), 1.0 / sigma_max_sq(a, cfg)?)),
        GdMode::Stochastic { r } => {
            if r == 0 || r > n {
                return Err(SketchError::BadRank { r, n }.into());
            }
            None
        }
    };
    let mut status = BaselineStatus::MaxIterExceeded;
    let mut wall = 0u64;
    for k in 1..=cfg.max_iter {
        let t0 = Instant::now();
        let mut g;
        let eta;
        match (&central, mode) {
            (Some((e, v, step)), _) => {
                g = x.matmul(e);
                g.axpy(-1.0, v);
                eta = *step;
            }
            (None, GdMode::Stochastic { r }) => {
                let s = sample_sketch(n, r, cfg.seed, k - 1)?.s;
                let a_s = a.matmul(&s);
                let b_s = b.matmul(&s);
                g = x.matmul(&a_s).sub(&b_s).matmul_t(&a_s);
                eta = 1.0 / sigma_max_sq(&a_s, cfg)?;
            }
            (None, GdMode::Central) => unreachable!(),
        }
        if lambda > 0.0 {
            g.axpy(lambda, &x);
        }
        x.axpy(-eta, &g);
        let d_new = x.matmul(c);
        if cfg.wall_clock {
            wall += t0.elapsed().as_nanos() as u64;
        }
        let err = oracle.rel_err(&d_new);
        rows.push(BaselineRow { iter: k, err_oracle: err, objective: Some(objective(&x, a, b, lambda)), wall_ns: wall, comm_floats_cum: 0, resid_corr: None });
        let stop = halt(cfg, &d_new, &dk, err);
        dk = d_new;
        if let Some(s) = stop {
            status = s;
            break;
        }
    }
    Ok((dk, BaselineTrace { rows, status, ridge: lambda, oracle, ledger: None }))
}

/// Distributed GD over the shards of `part`, run in the `C` domain.
///
/// With `X_0 = 0` the iterate satisfies `X_k C = D_k` where
/// `C_{k+1} = C_k - (eta/M)(sum_mu E^mu C_k + lambda C_k)` and
/// `D_{k+1} = D_k + (eta/M) sum_mu V^mu C_k`, so each machine sends
/// `E^mu C_k` and `V^mu C_k`: `(d + d') n'` floats per round.
pub fn gd_distributed(part: &Partition, cfg: &BaselineConfig) -> Result<(Mat, BaselineTrace), RefError> {
    let shards = &part.shards;
    let m = shards.len();
    let a = Mat::hcat(&shards.iter().map(|s| &s.a).collect::<Vec<_>>());
    let b = Mat::hcat(&shards.iter().map(|s| &s.b).collect::<Vec<_>>());
    let oracle = nystrom_solve(&a, &b, &part.c)?;
    let lambda = ridge_for(&a)?;
    let mut lam_max: f64 = 0.0;
    for s in shards {
        lam_max = lam_max.max(sigma_max_sq(&s.a, cfg)?);
    }
    let eta = 1.0 / lam_max;
    let mut ck = part.c.clone();
    let mut dk = Mat::zeros(b.rows(), ck.cols());
    let mut rows = vec![BaselineRow { iter: 0, err_oracle: oracle.rel_err(&dk), objective: None, wall_ns: 0, comm_floats_cum: 0, resid_corr: None }];
    let mut status = BaselineStatus::MaxIterExceeded;
    let mut wall = 0u64;
    let mut ledger = CommLedger::new(m);
    for k in 1..=cfg.max_iter {
        let t0 = Instant::now();
        let mut ec_sum = Mat::zeros(ck.rows(), ck.cols());
        let mut vc_sum = Mat::zeros(dk.rows(), dk.cols());
        let mut messages = Vec::with_capacity(m);
        for (mu, s) in shards.iter().enumerate() {
            let atc = s.a.t_matmul(&ck);
            let msg = RoundMessage::new(mu, s.a.matmul(&atc), s.b.matmul(&atc));
            ec_sum.axpy(1.0, &msg.c_contrib);
            vc_sum.axpy(1.0, &msg.d_contrib);
            messages.push(msg);
        }
        ledger.record(&messages);
        if lambda > 0.0 {
            ec_sum.axpy(lambda, &ck);
        }
        let f = eta / m as f64;
        let mut d_new = dk.clone();
        d_new.axpy(f, &vc_sum);
        ck.axpy(-f, &ec_sum);
        if cfg.wall_clock {
            wall += t0.elapsed().as_nanos() as u64;
        }
        let err = oracle.rel_err(&d_new);
        rows.push(BaselineRow { iter: k, err_oracle: err, objective: None, wall_ns: wall, comm_floats_cum: ledger.total(), resid_corr: None });
        let stop = halt(cfg, &d_new, &dk, err);
        dk = d_new;
        if let Some(s) = stop {
            status = s;
            break;
        }
    }
    Ok((dk, BaselineTrace { rows, status, ridge: lambda, oracle, ledger: Some(ledger) }))
}

/// Conjugate gradient on `X G = B A^T`, `G = A A^T`, from `X = 0` with the
/// Frobenius inner product:
///
/// ```text
/// alpha = <R, R> / <P, P G>    X += alpha P    R -= alpha P G
/// beta  = <R+, R+> / <R, R>    P = R+ + beta P
/// ```
///
/// Halts when the relative `X C` increment drops below `tol` or the residual
/// vanishes.
pub fn cg_run(a: &Mat, b: &Mat, c: &Mat, cfg: &BaselineConfig) -> Result<(Mat, BaselineTrace), RefError> {
    let oracle = nystrom_solve(a, b, c)?;
    let g = a.gram_rows();
    let g_norm = power_iteration(a, POWER_TOL, POWER_MAX_ITER)?.value;
    let mut x = Mat::zeros(b.rows(), a.rows());
    let mut r = b.matmul_t(a);
    let mut p = r.clone();
    let mut rr = r.frobenius_sq();
    let rr_floor = (a.rows() as f64 * EPS).powi(2) * rr;
    let mut dk = Mat::zeros(b.rows(), c.cols());
    let mut rows = vec![BaselineRow { iter: 0, err_oracle: oracle.rel_err(&dk), objective: Some(objective(&x, a, b, 0.0)), wall_ns: 0, comm_floats_cum: 0, resid_corr: None }];
    let mut status = BaselineStatus::MaxIterExceeded;
    let mut wall = 0u64;
    if rr == 0.0 {
        return Ok((dk, BaselineTrace { rows, status: BaselineStatus::Converged, ridge: 0.0, oracle, ledger: None }));
    }
    for k in 1..=cfg.max_iter {
        let t0 = Instant::now();
        let pg = p.matmul(&g);
        let pgp = p.inner(&pg);
        if pgp <= a.rows() as f64 * EPS * g_norm * p.frobenius_sq() {
            status = BaselineStatus::Breakdown { iter: k };
            break;
        }
        let alpha = rr / pgp;
        x.axpy(alpha, &p);
        let r_old = r.clone();
        r.axpy(-alpha, &pg);
        let rr_new = r.frobenius_sq();
        let corr = r.inner(&r_old) / rr;
        let beta = rr_new / rr;
        p = Mat::from_fn(p.rows(), p.cols(), |i, j| r.get(i, j) + beta * p.get(i, j));
        rr = rr_new;
        let d_new = x.matmul(c);
        if cfg.wall_clock {
            wall += t0.elapsed().as_nanos() as u64;
        }
        let err = oracle.rel_err(&d_new);
        rows.push(BaselineRow { iter: k, err_oracle: err, objective: Some(objective(&x, a, b, 0.0)), wall_ns: wall, comm_floats_cum: 0, resid_corr: Some(corr) });
        let mut stop = halt(cfg, &d_new, &dk, err);
        if stop.is_none() && rr <= rr_floor {
            stop = Some(BaselineStatus::Converged);
        }
        dk = d_new;
        if let Some(s) = stop {
            status = s;
            break;
        }
    }
    Ok((dk, BaselineTrace { rows, status, ridge: 0.0, oracle, ledger: None }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problemgen::{generate, partition, GenSpec};
    use crate::rng::Stream;

    fn gauss(r: usize, c: usize, seed: u64) -> Mat {
        let mut s = Stream::new(seed, "ref-test");
        Mat::from_fn(r, c, |_, _| s.gaussian())
    }

    #[test]
    fn oracle_trivial_cases() {
        let b = gauss(2, 4, 1);
        let c = gauss(4, 3, 2);
        let o = nystrom_solve(&Mat::identity(4), &b, &c).unwrap();
        assert!(o.w_star.sub(&b).max_abs() < 1e-14);
        assert!(o.d_star.sub(&b.matmul(&c)).max_abs() < 1e-13);
        let one = |v: f64| Mat::from_fn(1, 1, |_, _| v);
        let o = nystrom_solve(&one(1.0), &one(2.0), &one(3.0)).unwrap();
        assert_eq!(o.w_star.get(0, 0), 2.0);
        assert_eq!(o.d_star.get(0, 0), 6.0);
        assert!(matches!(nystrom_solve(&Mat::zeros(4, 4), &b, &c), Err(RefError::Mat(MatError::ZeroMatrix))));
    }

    #[test]
    fn oracle_recovers_hidden_block() {
        let p = generate(&GenSpec::svd(12, 20, 3, 4, 12, 50.0), 3).unwrap();
        let o = nystrom_solve(&p.a, &p.b, &p.c).unwrap();
        assert!(o.d_star.sub(&p.d_hidden).frobenius() <= 1e-8 * p.d_hidden.frobenius());
    }

    #[test]
    fn gd_identity_one_step() {
        let b = gauss(2, 5, 3);
        let c = gauss(5, 2, 4);
        let (_, tr) = gd_run(&Mat::identity(5), &b, &c, GdMode::Central, &BaselineConfig::default()).unwrap();
        assert!(tr.iterations_to(1e-10).unwrap() <= 5);
    }

    #[test]
    fn gd_objective_non_increasing() {
        let p = generate(&GenSpec::svd(10, 14, 2, 2, 10, 20.0), 5).unwrap();
        let cfg = BaselineConfig { max_iter: 3000, ..BaselineConfig::default() };
        let (_, tr) = gd_run(&p.a, &p.b, &p.c, GdMode::Central, &cfg).unwrap();
        for w in tr.rows.windows(2) {
            let (o0, o1) = (w[0].objective.unwrap(), w[1].objective.unwrap());
            assert!(o1 <= o0 * (1.0 + 1e-12) + 1e-300, "{o0} -> {o1}");
        }
        assert_eq!(tr.ridge, 0.0);
    }

    #[test]
    fn gd_ridge_only_when_rank_deficient() {
        let p = generate(&GenSpec::svd(10, 14, 2, 2, 4, 5.0), 6).unwrap();
        let cfg = BaselineConfig { max_iter: 10, ..BaselineConfig::default() };
        let (_, tr) = gd_run(&p.a, &p.b, &p.c, GdMode::Central, &cfg).unwrap();
        assert_eq!(tr.ridge, GD_RIDGE);
    }

    #[test]
    fn distributed_gd_matches_central_gd() {
        let p = generate(&GenSpec::svd(8, 12, 2, 2, 8, 5.0), 7).unwrap();
        let part = partition(&p, 1, 0.0, 0).unwrap();
        let cfg = BaselineConfig { max_iter: 50, tol: 0.0, ..BaselineConfig::default() };
        let (dc, _) = gd_run(&p.a, &p.b, &p.c, GdMode::Central, &cfg).unwrap();
        let (dd, tr) = gd_distributed(&part, &cfg).unwrap();
        assert!(dc.sub(&dd).frobenius() <= 1e-10 * dc.frobenius());
        assert_eq!(tr.rows[1].comm_floats_cum, ((8 + 2) * 2) as u64);
    }

    #[test]
    fn stochastic_gd_reduces_error() {
        let p = generate(&GenSpec::svd(6, 24, 2, 2, 6, 3.0), 8).unwrap();
        let cfg = BaselineConfig { max_iter: 300, tol: 0.0, ..BaselineConfig::default() };
        let (_, tr) = gd_run(&p.a, &p.b, &p.c, GdMode::Stochastic { r: 12 }, &cfg).unwrap();
        assert!(tr.rows.last().unwrap().err_oracle < 1e-3);
    }

    #[test]
    fn cg_identity_gram_one_iteration() {
        let q = crate::matcore::orthonormal_columns(&gauss(9, 4, 9)).unwrap().transpose();
        let b = gauss(2, 9, 10);
        let c = gauss(4, 2, 11);
        let (d, tr) = cg_run(&q, &b, &c, &BaselineConfig::default()).unwrap();
        assert_eq!(tr.iterations(), 1);
        assert!(tr.oracle.rel_err(&d) < 1e-12);
    }

    #[test]
    fn cg_finite_termination() {
        let a = gauss(32, 128, 12);
        let b = gauss(2, 128, 13);
        let c = gauss(32, 2, 14);
        let (_, tr) = cg_run(&a, &b, &c, &BaselineConfig { tol: 0.0, max_iter: 32, ..BaselineConfig::default() }).unwrap();
        assert!(tr.rows.last().unwrap().err_oracle < 1e-12, "{:?}", tr.rows.last());
    }

    #[test]
    fn cg_consecutive_residuals_orthogonal() {
        let a = gauss(16, 64, 15);
        let b = gauss(2, 64, 16);
        let c = gauss(16, 2, 17);
        let (_, tr) = cg_run(&a, &b, &c, &BaselineConfig { tol: 0.0, max_iter: 10, ..BaselineConfig::default() }).unwrap();
        let corr: Vec<f64> = tr.rows.iter().filter_map(|r| r.resid_corr).collect();
        assert_eq!(corr.len(), 10);
        assert!(corr.iter().all(|c| c.abs() <= 1e-8), "{corr:?}");
    }
}
