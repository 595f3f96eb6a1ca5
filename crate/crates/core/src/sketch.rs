//! Column-sketched EAGLE.
//!
//! Each iteration draws an orthonormal `S` (n x r) and updates through the
//! sketched blocks `AS` and `BS` only:
//!
//! ```text
//! A+ = A - eta rho (AS)(AS)^T (AS) S^T      C+ = C - gamma rho (AS)(AS)^T C
//! B+ = B - eta rho (BS)(AS)^T (AS) S^T      D+ = D + gamma rho (BS)(AS)^T C
//! ```
//!
//! with `rho = 1 / ||AS||_2^2`.

use std::time::Instant;

use thiserror::Error;

use crate::eagle::{d_increment, EagleError, rel_diff, IterRecord, Oracle, RunStatus, Spectrum, Trace};
use crate::matcore::{orthonormal_columns, power_iteration_warm, sym_eig, Mat, MatError, POWER_MAX_ITER, POWER_TOL};
use crate::problemgen::BlockProblem;
use crate::rng::Stream;

#[derive(Debug, Error)]
pub enum SketchError {
    #[error("sketch width {r} outside 1..={n}")]
    BadRank { r: usize, n: usize },
    #[error("sketched block AS is zero at iteration {0}")]
    ZeroSketchedBlock(usize),
    #[error("non-finite {block} after iteration {iter}")]
    NonFinite { block: &'static str, iter: usize },
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error(transparent)]
    Eagle(#[from] EagleError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sketch {
    pub s: Mat,
    pub iter: usize,
    /// Key of the substream the sketch was drawn from.
    pub key: u64,
}

impl Sketch {
    pub fn width(&self) -> usize {
        self.s.cols()
    }

    /// `max |S^T S - I|`.
    pub fn orthogonality_defect(&self) -> f64 {
        self.s.t_matmul(&self.s).sub(&Mat::identity(self.width())).max_abs()
    }
}

/// Orthonormalized `n x r` Gaussian from the substream `(seed, "sketch", iter)`.
pub fn sample_sketch(n: usize, r: usize, seed: u64, iter: usize) -> Result<Sketch, SketchError> {
    if r == 0 || r > n {
        return Err(SketchError::BadRank { r, n });
    }
    let mut st = Stream::new(seed, "sketch").child("iter", iter as u64);
    let key = st.key();
    let g = Mat::from_fn(n, r, |_, _| st.gaussian());
    let s = orthonormal_columns(&g)?;
    if s.cols() != r {
        return Err(SketchError::BadRank { r, n });
    }
    Ok(Sketch { s, iter, key })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchConfig {
    pub eta: f64,
    pub gamma: f64,
    pub stop_tau: f64,
    pub max_iter: usize,
    /// Reuse the first sketch for every iteration.
    pub fixed_sketch: bool,
    pub seed: u64,
    pub track_error: bool,
    pub track_diagnostics: bool,
    pub wall_clock: bool,
}

impl Default for SketchConfig {
    fn default() -> Self {
        Self {
            eta: 1.0 / 3.0,
            gamma: 1.0,
            stop_tau: 1e-12,
            max_iter: 2000,
            fixed_sketch: false,
            seed: 0,
            track_error: true,
            track_diagnostics: false,
            wall_clock: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchState {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
    pub l: usize,
    /// Dominant left direction of the last `AS`; warm start for the next `rho~`.
    pub power_start: Option<Vec<f64>>,
}

impl SketchState {
    pub fn new(p: &BlockProblem) -> Self {
        Self { a: p.a.clone(), b: p.b.clone(), c: p.c.clone(), d: Mat::zeros(p.d_prime(), p.n_prime()), l: 0, power_start: None }
    }
}

/// Flops of one sketched update, excluding the `rho` estimate.
pub fn sketched_step_flops(d: usize, n: usize, dp: usize, np: usize, r: usize) -> u64 {
    let (d, n, dp, np, r) = (d as u64, n as u64, dp as u64, np as u64, r as u64);
    let sketch = 2 * d * n * r + 2 * dp * n * r;
    let updates = 2 * (d * n + dp * n + d * np + dp * np);
    let back = 2 * d * r * n + 2 * dp * r * n;
    // E~ = (AS)(AS)^T, V~ = (BS)(AS)^T, E~(AS), V~(AS), E~C, V~C.
    let core = d * (d + 1) * r + 2 * dp * d * r + 2 * d * d * r + 2 * dp * d * r + 2 * d * d * np + 2 * dp * d * np;
    sketch + core + back + updates
}

/// `rho~ = 1 / ||AS||_2^2` and the dominant left direction of `AS`.
pub fn sketched_rho(a_s: &Mat, start: Option<&[f64]>, iter: usize) -> Result<(f64, Vec<f64>), SketchError> {
    if a_s.max_abs() == 0.0 {
        return Err(SketchError::ZeroSketchedBlock(iter));
    }
    let est = power_iteration_warm(a_s, start, POWER_TOL, POWER_MAX_ITER)?;
    Ok((1.0 / est.value, est.vector))
}

/// One sketched update. Returns the new state and the `rho~` used.
pub fn sketched_step(state: &SketchState, sketch: &Sketch, cfg: &SketchConfig) -> Result<(SketchState, f64), SketchError> {
    debug_assert!(sketch.orthogonality_defect() <= 1e-10);
    let s = &sketch.s;
    let a_s = state.a.matmul(s);
    let b_s = state.b.matmul(s);
    let (rho, dir) = sketched_rho(&a_s, state.power_start.as_deref(), state.l)?;
    let (eta_l, gamma_l) = (cfg.eta * rho, cfg.gamma * rho);
    let e = a_s.gram_rows();
    let v = b_s.matmul_t(&a_s);
    let mut next = state.clone();
    next.a.axpy(-eta_l, &e.matmul(&a_s).matmul_t(s));
    next.b.axpy(-eta_l, &v.matmul(&a_s).matmul_t(s));
    next.c.axpy(-gamma_l, &e.matmul(&state.c));
    next.d.axpy(gamma_l, &v.matmul(&state.c));
    next.l += 1;
    next.power_start = Some(dir);
    for (name, m) in [("A", &next.a), ("B", &next.b), ("C", &next.c), ("D", &next.d)] {
        if !m.is_finite() {
            return Err(SketchError::NonFinite { block: name, iter: next.l });
        }
    }
    Ok((next, rho))
}

#[derive(Debug, Clone)]
pub struct SketchRun {
    pub d: Mat,
    pub trace: Trace,
    pub status: RunStatus,
    pub iterations: usize,
    pub r: usize,
    pub final_state: SketchState,
}

pub fn run_sketched(p: &BlockProblem, r: usize, cfg: &SketchConfig) -> Result<SketchRun, SketchError> {
    let n = p.n();
    if r == 0 || r > n {
        return Err(SketchError::BadRank { r, n });
    }
    let mut state = SketchState::new(p);
    let mut trace = Trace { c0: Some(p.c.clone()), ..Trace::default() };
    if cfg.track_error {
        trace.oracle = Some(Oracle::new(&p.a, &p.b, &p.c));
    }
    let rank0 = if cfg.track_diagnostics { sym_eig(&p.a.gram_rows())?.rank() } else { 0 };
    let flops_per = sketched_step_flops(p.d(), n, p.d_prime(), p.n_prime(), r);
    let record = |state: &SketchState, trace: &mut Trace, wall: u64, flops: u64| -> Result<(), SketchError> {
        let spectrum = if cfg.track_diagnostics {
            Some(Spectrum::of(&state.a.gram_rows(), rank0)?)
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
    record(&state, &mut trace, 0, 0)?;
    let fixed = if cfg.fixed_sketch { Some(sample_sketch(n, r, cfg.seed, 0)?) } else { None };
    let mut status = RunStatus::MaxIterExceeded;
    let (mut wall, mut flops) = (0u64, 0u64);
    while state.l < cfg.max_iter {
        let t0 = Instant::now();
        let drawn;
        let sk = match &fixed {
            Some(s) => s,
            None => {
                drawn = sample_sketch(n, r, cfg.seed, state.l)?;
                &drawn
            }
        };
        let (next, rho) = sketched_step(&state, sk, cfg)?;
        if cfg.wall_clock {
            wall += t0.elapsed().as_nanos() as u64;
        }
        flops += flops_per;
        if let Some(row) = trace.rows.last_mut() {
            row.rho = Some(rho);
        }
        let inc = d_increment(&next.d, &state.d);
        state = next;
        record(&state, &mut trace, wall, flops)?;
        if inc < cfg.stop_tau {
            status = RunStatus::Converged;
            break;
        }
    }
    Ok(SketchRun { d: state.d.clone(), iterations: state.l, trace, status, r, final_state: state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eagle::{run_centralized, update_blocks, SolverConfig};
    use crate::problemgen::{generate, GenSpec};

    #[test]
    fn square_sketch_is_orthogonal() {
        let sk = sample_sketch(12, 12, 3, 0).unwrap();
        assert!(sk.s.matmul_t(&sk.s).sub(&Mat::identity(12)).max_abs() < 1e-9);
        assert!(sample_sketch(12, 5, 3, 7).unwrap().orthogonality_defect() < 1e-10);
        assert!(matches!(sample_sketch(4, 5, 0, 0), Err(SketchError::BadRank { r: 5, n: 4 })));
        assert!(matches!(sample_sketch(4, 0, 0, 0), Err(SketchError::BadRank { .. })));
    }

    #[test]
    fn draws_differ_by_iteration() {
        let a = sample_sketch(8, 3, 1, 0).unwrap();
        let b = sample_sketch(8, 3, 1, 1).unwrap();
        assert_eq!(a, sample_sketch(8, 3, 1, 0).unwrap());
        assert_ne!(a.s, b.s);
    }

    #[test]
    fn mean_projector_is_scaled_identity() {
        let (n, r, draws) = (6, 2, 2000);
        let mut acc = Mat::zeros(n, n);
        for i in 0..draws {
            let s = sample_sketch(n, r, 11, i).unwrap().s;
            acc.axpy(1.0 / draws as f64, &s.matmul_t(&s));
        }
        let target = Mat::identity(n).scale(r as f64 / n as f64);
        assert!(acc.sub(&target).max_abs() < 0.05);
    }

    #[test]
    fn full_width_step_equals_central_step() {
        let p = generate(&GenSpec::svd(6, 9, 2, 2, 6, 10.0), 1).unwrap();
        let sk = sample_sketch(9, 9, 5, 0).unwrap();
        let state = SketchState::new(&p);
        let (next, rho) = sketched_step(&state, &sk, &SketchConfig::default()).unwrap();
        let (a, b, c, d) = update_blocks(&p.a, &p.b, &p.c, &state.d, rho / 3.0, rho);
        for (x, y) in [(&next.a, &a), (&next.b, &b), (&next.c, &c), (&next.d, &d)] {
            assert!(x.sub(y).max_abs() <= 1e-12 * y.max_abs().max(1.0));
        }
        assert_eq!(next.a.shape(), (6, 9));
        assert_eq!(next.d.shape(), (2, 2));
    }

    #[test]
    fn zero_block_rejected() {
        let mut p = generate(&GenSpec::svd(3, 4, 1, 1, 3, 2.0), 1).unwrap();
        p.a = Mat::zeros(3, 4);
        let sk = sample_sketch(4, 2, 0, 0).unwrap();
        assert!(matches!(sketched_step(&SketchState::new(&p), &sk, &SketchConfig::default()), Err(SketchError::ZeroSketchedBlock(0))));
    }

    #[test]
    fn full_width_run_matches_central() {
        let p = generate(&GenSpec::svd(16, 16, 2, 2, 16, 30.0), 2).unwrap();
        let sk = run_sketched(&p, 16, &SketchConfig::default()).unwrap();
        let ce = run_centralized(&p, &SolverConfig::default()).unwrap();
        for (x, y) in sk.trace.errors().iter().zip(ce.trace.errors()) {
            assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn flops_linear_in_width() {
        let (d, n) = (240, 240);
        let full = sketched_step_flops(d, n, 2, 2, n) as f64;
        for r in [30, 60, 120] {
            let ratio = sketched_step_flops(d, n, 2, 2, r) as f64 / full;
            let want = r as f64 / n as f64;
            assert!((ratio / want - 1.0).abs() < 0.1, "r={r}: {ratio}");
        }
    }

    #[test]
    fn fixed_sketch_converges_to_projected_problem() {
        let p = generate(&GenSpec::svd(4, 20, 1, 1, 4, 5.0), 3).unwrap();
        let cfg = SketchConfig { fixed_sketch: true, max_iter: 400, ..SketchConfig::default() };
        let run = run_sketched(&p, 10, &cfg).unwrap();
        let s = sample_sketch(20, 10, 0, 0).unwrap().s;
        let want = Oracle::new(&p.a.matmul(&s), &p.b.matmul(&s), &p.c).d_star;
        assert!(run.d.sub(&want).frobenius() <= 1e-8 * want.frobenius());
    }
}
