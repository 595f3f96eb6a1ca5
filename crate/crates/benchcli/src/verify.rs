//! Executable invariant suite. Every check reports a measured value against a
//! threshold; errors and panics inside a check become failed entries.

use std::collections::BTreeMap;
use std::error::Error;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use eagle_core::dist::{run_distributed, DistConfig};
use eagle_core::eagle::{
    estim_step, rel_diff, rho_estimate, run_centralized, step, update_blocks, EstimConfig, EstimState, IterState,
    RhoPolicy, SolverConfig,
};
use eagle_core::matcore::{least_squares_min_norm, power_iteration, sym_eig, Mat, EPS, POWER_MAX_ITER, POWER_TOL};
use eagle_core::problemgen::{generate, partition, BlockProblem, GenKind, GenSpec};
use eagle_core::reference::{cg_run, gd_run, nystrom_solve, BaselineConfig, GdMode};
use eagle_core::rng::Stream;
use eagle_core::sketch::{run_sketched, sample_sketch, SketchConfig};

use crate::rows::{fmt_f64, read_csv};
use crate::runner::{read_summary, run_experiment, summary_file_name, SummaryRow};
use crate::spec::{parse_spec, Preset};

type Res<T> = Result<T, Box<dyn Error>>;

/// Deliberate defects for mutation smoke tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Subtract the `D` increment instead of adding it; `(A, B, C)` untouched.
    FlipGammaSignInD,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    /// Seeds for checks that do not fix their own count.
    pub seeds: u64,
    /// Relative slack of the quadratic and geometric theta laws.
    pub theta_rel_tol: f64,
    /// Theta values at or below `theta_floor * d * EPS` are roundoff and not checked.
    pub theta_floor: f64,
    pub mutation: Option<Mutation>,
    /// Pool size compared against a single thread in the determinism check.
    pub threads: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seeds: 20, theta_rel_tol: 1e-6, theta_floor: 64.0, mutation: None, threads: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: &'static str,
    pub measured: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    /// `threshold - measured`; negative for a failure.
    pub fn margin(&self) -> f64 {
        self.threshold - self.measured
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failed(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    /// `module,invariant,passed,measured,threshold,margin,detail` per check.
    pub fn write_csv(&self, w: impl Write) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["module", "invariant", "passed", "measured", "threshold", "margin", "detail"])?;
        for c in &self.checks {
            out.write_record([
                c.module,
                c.name,
                if c.passed { "true" } else { "false" },
                &fmt_f64(c.measured),
                &fmt_f64(c.threshold),
                &fmt_f64(c.margin()),
                &c.detail,
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

struct Measure {
    measured: f64,
    threshold: f64,
    detail: String,
}

fn measure(measured: f64, threshold: f64, detail: impl Into<String>) -> Res<Measure> {
    Ok(Measure { measured, threshold, detail: detail.into() })
}

type CheckFn = fn(&VerifyOptions) -> Res<Measure>;

const CHECKS: &[(&str, &str, CheckFn)] = &[
    ("matcore", "transpose_of_product", transpose_of_product),
    ("matcore", "spectral_norm_bounds", spectral_norm_bounds),
    ("matcore", "sym_eig_reconstruction", sym_eig_reconstruction),
    ("problemgen", "generation_determinism", generation_determinism),
    ("problemgen", "noiseless_w_star", noiseless_w_star),
    ("problemgen", "partition_keeps_map", partition_keeps_map),
    ("eagle", "eigenstructure_commutation", eigenstructure_commutation),
    ("eagle", "kernel_preservation", kernel_preservation),
    ("eagle", "eigenvalue_order", eigenvalue_order),
    ("eagle", "theta_quadratic", theta_quadratic),
    ("eagle", "theta_geometric", theta_geometric),
    ("eagle", "lambda_bar_recursion", lambda_bar_recursion),
    ("eagle", "scale_equivariance", scale_equivariance),
    ("eagle", "newton_schulz_form", newton_schulz_form),
    ("eagle", "telescoping_identity", telescoping_identity),
    ("eagle", "estimation_equivalence", estimation_equivalence),
    ("eagle-dist", "replica_identity", replica_identity),
    ("eagle-dist", "v_invariance", v_invariance),
    ("eagle-dist", "ledger_exactness", ledger_exactness),
    ("eagle-dist", "accelerated_equals_plain", accelerated_equals_plain),
    ("eagle-dist", "parallel_determinism", parallel_determinism),
    ("eagle-sketch", "sketch_orthogonality", sketch_orthogonality),
    ("eagle-sketch", "expected_step", expected_step),
    ("eagle-sketch", "sketched_monotone_error", sketched_monotone_error),
    ("reference", "gd_objective_monotone", gd_objective_monotone),
    ("reference", "cg_residual_orthogonality", cg_residual_orthogonality),
    ("reference", "baseline_agreement", baseline_agreement),
    ("benchcli", "csv_determinism", csv_determinism),
    ("benchcli", "summary_self_consistency", summary_self_consistency),
];

/// Names of all checks, in report order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.1).collect()
}

/// Run every check. Never fails: errors and panics are reported as failed entries.
pub fn verify_suite(opts: &VerifyOptions) -> Report {
    Report { checks: CHECKS.iter().map(|&(module, name, f)| evaluate(module, name, f, opts)).collect() }
}

/// Run the check called `name` alone.
pub fn run_check(name: &str, opts: &VerifyOptions) -> Option<CheckResult> {
    CHECKS.iter().find(|c| c.1 == name).map(|&(module, name, f)| evaluate(module, name, f, opts))
}

fn evaluate(module: &'static str, name: &'static str, f: CheckFn, opts: &VerifyOptions) -> CheckResult {
    let failed = |detail: String| CheckResult { module, name, measured: f64::NAN, threshold: 0.0, passed: false, detail };
    match catch_unwind(AssertUnwindSafe(|| f(opts).map_err(|e| e.to_string()))) {
        Ok(Ok(m)) => CheckResult {
            module,
            name,
            passed: m.measured <= m.threshold,
            measured: m.measured,
            threshold: m.threshold,
            detail: m.detail,
        },
        Ok(Err(e)) => failed(format!("error: {e}")),
        Err(p) => {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            failed(format!("panic: {}", msg.unwrap_or_default()))
        }
    }
}

fn gauss(r: usize, c: usize, seed: u64) -> Mat {
    let mut s = Stream::new(seed, "verify");
    Mat::from_fn(r, c, |_, _| s.gaussian())
}

fn svd(d: usize, n: usize, rank: usize, kappa: f64, seed: u64) -> Res<BlockProblem> {
    Ok(generate(&GenSpec::svd(d, n, 2, 2, rank, kappa), seed)?)
}

fn transpose_of_product(o: &VerifyOptions) -> Res<Measure> {
    let mut worst: f64 = 0.0;
    for seed in 0..o.seeds {
        let (a, b) = (gauss(8, 8, seed), gauss(8, 8, seed + 10_000));
        let lhs = a.matmul(&b).transpose();
        let rhs = b.transpose().matmul(&a.transpose());
        worst = worst.max(lhs.sub(&rhs).max_abs() / (a.frobenius() * b.frobenius()));
    }
    measure(worst, 1e-14, format!("{} random 8x8 pairs, max |(AB)^T - B^T A^T| / (|A| |B|)", o.seeds))
}

fn spectral_norm_bounds(o: &VerifyOptions) -> Res<Measure> {
    let mut worst: f64 = 0.0;
    for seed in 0..o.seeds {
        let (d, n) = (1 + (seed % 9) as usize, 1 + ((seed / 3) % 9) as usize);
        let a = gauss(d, n, seed);
        let s = power_iteration(&a, POWER_TOL, POWER_MAX_ITER)?.value;
        let col_max = (0..n).map(|j| a.col(j).iter().map(|x| x * x).sum::<f64>()).fold(0.0, f64::max);
        let f = a.frobenius_sq();
        worst = worst.max((col_max / n as f64 - s) / f).max((s - f) / f);
    }
    measure(worst, 1e-12, "largest relative excursion outside [max col^2 / n, |A|_F^2]")
}

fn sym_eig_reconstruction(o: &VerifyOptions) -> Res<Measure> {
    let mut worst: f64 = 0.0;
    for seed in 0..o.seeds {
        let d = 2 + (seed % 14) as usize;
        let e = gauss(d, d + 3, seed).gram_rows();
        let eig = sym_eig(&e)?;
        let recon = eig.reconstruct().sub(&e).frobenius() / e.frobenius();
        let orth = eig.vectors.t_matmul(&eig.vectors).sub(&Mat::identity(d)).max_abs();
        worst = worst.max(recon).max(orth);
    }
    measure(worst, 1e-10, "max of reconstruction error and |V^T V - I|")
}

fn generation_determinism(o: &VerifyOptions) -> Res<Measure> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(o.threads.max(2)).build()?;
    let mut mismatches = 0usize;
    let mut total = 0usize;
    for &kind in GenKind::ALL.iter() {
        let spec = GenSpec::new(kind, 12, 16, 2, 3, 6);
        for seed in 0..o.seeds.min(10) {
            let a = generate(&spec, seed).map_err(|e| e.to_string());
            let b = pool.install(|| generate(&spec, seed)).map_err(|e| e.to_string());
            total += 1;
            mismatches += usize::from(a != b);
        }
    }
    measure(mismatches as f64, 0.0, format!("{total} (generator, seed) pairs, serial vs pool of {}", o.threads.max(2)))
}

fn noiseless_w_star(o: &VerifyOptions) -> Res<Measure> {
    let mut worst: f64 = 0.0;
    for &kind in GenKind::ALL.iter() {
        for seed in 0..o.seeds.min(10) {
            let p = generate(&GenSpec::new(kind, 12, 24, 2, 3, 6), seed)?;
            let w = least_squares_min_norm(&p.a, &p.b);
            worst = worst.max(p.b.sub(&w.matmul(&p.a)).frobenius() / p.b.frobenius());
        }
    }
    measure(worst, 1e-9, "max |B - W* A| / |B| over all generators")
}

fn partition_keeps_map(o: &VerifyOptions) -> Res<Measure> {
    let mut worst: f64 = 0.0;
    for seed in 0..o.seeds {
        let p = svd(8, 24, 8, 30.0, seed)?;
        let w = least_squares_min_norm(&p.a, &p.b);
        let part = partition(&p, 1 + (seed % 5) as usize, 0.0, seed)?;
        for s in &part.shards {
            worst = worst.max(s.b.sub(&w.matmul(&s.a)).frobenius() / p.b.frobenius());
        }
    }
    measure(worst, 1e-9, "max |B^mu - W* A^mu| / |B| at overlap 0")
}

fn eigenstructure_commutation(o: &VerifyOptions) -> Res<Measure> {
    let mut worst: f64 = 0.0;
    let cfg = SolverConfig::default();
    for seed in 0..o.seeds {
        let p = svd(16, 16, 16, 10.0 + 40.0 * seed as f64, seed)?;
        let e0 = p.a.gram_rows();
        let mut st = IterState::new(&p, &cfg)?;
        for _ in 0..12 {
            st = step(&st, &cfg)?;
            let el = st.a.gram_rows();
            worst = worst.max(e0.matmul(&el).sub(&el.matmul(&e0)).frobenius() / (e0.frobenius() * el.frobenius()));
        }
    }
    measure(worst, 1e-9, "16x16, 12 steps, max |E0 El - El E0| / (|E0| |El|)")
}

fn kernel_preservation(o: &VerifyOptions) -> Res<Measure> {
    let mut worst: f64 = 0.0;
    let cfg = SolverConfig::default();
    for seed in 0..o.seeds {
        let d = 8 + (seed % 8) as usize;
        let p = svd(d, d + 4, d / 2, 20.0, seed)?;
        let kernel = sym_eig(&p.a.gram_rows())?.kernel_basis();
        let mut st = IterState::new(&p, &cfg)?;
        for _ in 0..12 {
            st = step(&st, &cfg)?;
            let el = st.a.gram_rows();
            let top = sym_eig(&el)?.top();
            for j in 0..kernel.cols() {
                let v = kernel.col(j);
                let ev = el.matvec(&v);
                worst = worst.max(ev.iter().map(|x| x * x).sum::<f64>().sqrt() / top);
            }
        }
    }
    measure(worst, 1e-10, "max |E_l v| / |E_l|_2 over kernel vectors v of E_0")
}

fn eigenvalue_order(o: &VerifyOptions) -> Res<Measure> {
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let cfg = SolverConfig { eta: 0.3, ..SolverConfig::default() };
    for seed in 0..o.seeds {
        let d = 6 + (seed % 10) as usize;
        let p = svd(d, d + 3, d, 10.0 + 50.0 * (seed % 7) as f64, seed)?;
        let mut st = IterState::new(&p, &cfg)?;
        for _ in 0..8 {
            let before = sym_eig(&st.a.gram_rows())?.values;
            let next = step(&st, &cfg)?;
            let g = cfg.eta * next.rho;
            if g * before[0] <= 1.0 / 3.0 {
                let after = sym_eig(&next.a.gram_rows())?.values;
                let mapped: Vec<f64> = before.iter().map(|&l| l * (1.0 - g * l).powi(2)).collect();
                for i in 0..d {
                    worst = worst.max((after[i] - mapped[i]).abs() / after[0]);
                    if i + 1 < d {
                        worst = worst.max((mapped[i + 1] - mapped[i]) / after[0]);
                    }
                }
                checked += 1;
            }
            st = next;
        }
    }
    measure(worst, 1e-9, format!("{checked} steps with eta rho lambda_bar <= 1/3; sorted spectra map in order"))
}

/// Worst `theta_(l+1) / bound - 1` over consecutive pairs above the floor.
fn theta_law(o: &VerifyOptions, quadratic: bool) -> Res<Measure> {
    let d = 24;
    let floor = o.theta_floor * d as f64 * EPS;
    let etas: &[f64] = if quadratic { &[1.0 / 3.0] } else { &[0.1, 0.2, 0.3, 1.0 / 3.0] };
    let mut worst = f64::NEG_INFINITY;
    let mut checked = 0usize;
    for seed in 0..o.seeds {
        let p = svd(d, 30, d, 1e3, seed)?;
        for &eta in etas {
            let cfg = SolverConfig { eta, ..SolverConfig::default() }.with_diagnostics();
            let run = run_centralized(&p, &cfg)?;
            for w in run.trace.rows.windows(2) {
                let (s0, s1) = match (w[0].spectrum, w[1].spectrum) {
                    (Some(a), Some(b)) => (a, b),
                    _ => continue,
                };
                let g = eta * w[0].rho.unwrap_or(0.0) * s0.lambda_bar;
                let bound = if quadratic {
                    if s0.theta >= 1.0 {
                        continue;
                    }
                    0.75 * s0.theta * s0.theta
                } else {
                    if g > 1.0 / 3.0 {
                        continue;
                    }
                    s0.theta * (-5.0 * g / 3.0).exp()
                };
                if s1.theta <= floor {
                    continue;
                }
                checked += 1;
                worst = worst.max(s1.theta / bound - 1.0);
            }
        }
    }
    let law = if quadratic { "0.75 theta^2" } else { "theta exp(-5 g / 3)" };
    measure(
        worst,
        o.theta_rel_tol,
        format!("{checked} pairs above floor {floor:.1e}; max theta_(l+1) / ({law}) - 1"),
    )
}

fn theta_quadratic(o: &VerifyOptions) -> Res<Measure> {
    theta_law(o, true)
}

fn theta_geometric(o: &VerifyOptions) -> Res<Measure> {
    theta_law(o, false)
}

fn lambda_bar_recursion(o: &VerifyOptions) -> Res<Measure> {
    let mut worst: f64 = 0.0;
    let cfg = SolverConfig::default();
    for seed in 0..o.seeds {
        let d = 6 + (seed % 10) as usize;
        let p = svd(d, d + 2, d, 10.0 + 50.0 * (seed % 7) as f64, seed)?;
        let mut st = IterState::new(&p, &cfg)?;
        for _ in 0..8 {
            let lam = sym_eig(&st.a.gram_rows())?.top();
            let next = step(&st, &cfg)?;
            let lam1 = sym_eig(&next.a.gram_rows())?.top();
            worst = worst.max((lam1 / lam - 4.0 / 9.0).abs());
            st = next;
        }
    }
    measure(worst, 1e-6, "max |lambda_bar_(l+1) / lambda_bar_l - 4/9|")
}

fn scale_equivariance(o: &VerifyOptions) -> Res<Measure> {
    let cfg = SolverConfig::default();
    let mut mismatches = 0usize;
    for seed in 0..o.seeds {
        let p = svd(8, 10, 8, 40.0, seed)?;
        let mut s1 = IterState::new(&p, &cfg)?;
        let mut scaled: Vec<(f64, IterState)> =
            [0.25, 4.0].iter().map(|&c| Ok((c, IterState::new(&p.scaled(c), &cfg)?))).collect::<Res<_>>()?;
        for _ in 0..8 {
            s1 = step(&s1, &cfg)?;
            for (c, s) in scaled.iter_mut() {
                *s = step(s, &cfg)?;
                mismatches += usize::from(s.d != s1.d.scale(*c));
            }
        }
    }
    measure(mismatches as f64, 0.0, "D_l of c X equal to c D_l bit for bit, c in {1/4, 4}")
}

fn newton_schulz_form(o: &VerifyOptions) -> Res<Measure> {
    let cfg = SolverConfig { rho_policy: RhoPolicy::AnalyticRescale, ..SolverConfig::default() };
    let mut worst: f64 = 0.0;
    for seed in 0..o.seeds {
        let p = svd(10, 14, 10, 10.0 + 100.0 * seed as f64, seed)?;
        let mut st = IterState::new(&p, &cfg)?;
        for _ in 0..10 {
            let next = step(&st, &cfg)?;
            let abar = st.a.scale(1.0 / sym_eig(&st.a.gram_rows())?.top().sqrt());
            let mut ns = abar.scale(3.0);
            ns.axpy(-1.0, &abar.gram_rows().matmul(&abar));
            let ns = ns.scale(0.5);
            let actual = next.a.scale(1.0 / sym_eig(&next.a.gram_rows())?.top().sqrt());
            worst = worst.max(rel_diff(&actual, &ns));
            st = next;
        }
    }
    measure(worst, 1e-9, "max |A_(l+1) / |A_(l+1)| - (3 A - A A^T A) / 2| relative, normalized iterates")
}

/// `D_l = W* (C_0 - C_l)`, which is `W* (I - N_l) C_0`.
fn telescoping_identity(o: &VerifyOptions) -> Res<Measure> {
    let cfg = SolverConfig::default();
    let mut worst: f64 = 0.0;
    for seed in 0..o.seeds {
        let d = 16 + (seed % 4) as usize * 16;
        let rank = if seed % 5 == 4 { d / 2 } else { d };
        let p = svd(d, d + 8, rank, 1e2, seed)?;
        let oracle = nystrom_solve(&p.a, &p.b, &p.c)?;
        let scale = oracle.d_star.frobenius();
        let mut st = IterState::new(&p, &cfg)?;
        for _ in 0..25 {
            let (r, dir) = rho_estimate(&st, &cfg)?;
            let (a, b, c, mut dn) = update_blocks(&st.a, &st.b, &st.c, &st.d, cfg.eta * r, cfg.gamma * r);
            if o.mutation == Some(Mutation::FlipGammaSignInD) {
                dn = st.d.scale(2.0).sub(&dn);
            }
            st = IterState { a, b, c, d: dn, l: st.l + 1, rho: r, scale_accum: 1.0, power_start: dir };
            let predicted = oracle.w_star.matmul(&p.c.sub(&st.c));
            worst = worst.max(st.d.sub(&predicted).frobenius() / scale);
        }
    }
    measure(worst, 1e-10, "max |D_l - W* (I - N_l) C_0| / |D*|, including rank-deficient cases")
}

fn estimation_equivalence(o: &VerifyOptions) -> Res<Measure> {
    let mut worst: f64 = 0.0;
    for seed in 0..o.seeds.min(8) {
        let p = svd(20, 30, 20 - (seed % 2) as usize * 8, 1e2, seed)?;
        let cfg = SolverConfig::default();
        let ecfg = EstimConfig::default();
        let mut st = IterState::new(&p, &cfg)?;
        let mut es = EstimState::new(&p.a, &p.b);
        for _ in 0..40 {
            st = step(&st, &cfg)?;
            es = estim_step(&es, &ecfg)?;
            worst = worst.max(es.w.matmul(&p.c).sub(&st.d).frobenius() / st.d.frobenius().max(1.0));
        }
    }
    measure(worst, 1e-8, "max |W_l C - D_l| / max(1, |D_l|) under matched schedules")
}

fn dist_problem(seed: u64) -> Res<BlockProblem> {
    svd(10, 30, 10, 20.0 + 30.0 * (seed % 5) as f64, seed)
}

fn replica_identity(o: &VerifyOptions) -> Res<Measure> {
    let mut mismatches = 0usize;
    for seed in 0..o.seeds {
        let part = partition(&dist_problem(seed)?, 1 + (seed % 5) as usize, 0.0, seed)?;
        let run = run_distributed(&part, &DistConfig { max_iter: 20, ..DistConfig::default() })?;
        mismatches += run.workers.iter().filter(|w| w.c != run.workers[0].c || w.d != run.workers[0].d).count();
    }
    measure(mismatches as f64, 0.0, "workers whose (C, D) differ from worker 0 after the run")
}

fn v_invariance(o: &VerifyOptions) -> Res<Measure> {
    let mut worst: f64 = 0.0;
    for seed in 0..o.seeds {
        let p = dist_problem(seed)?;
        let w_star = least_squares_min_norm(&p.a, &p.b);
        let part = partition(&p, 1 + (seed % 4) as usize, 0.0, seed)?;
        for rounds in [1usize, 5, 15] {
            let run = run_distributed(&part, &DistConfig { max_iter: rounds, stop_tau: 0.0, ..DistConfig::default() })?;
            for w in &run.workers {
                let e = w.a.gram_rows();
                let v = w.b.matmul_t(&w.a);
                worst = worst.max(v.sub(&w_star.matmul(&e)).frobenius() / (w_star.frobenius() * e.frobenius()));
            }
        }
    }
    measure(worst, 1e-9, "max |V^mu - W* E^mu| / (|W*| |E^mu|) after 1, 5, 15 rounds")
}

fn ledger_exactness(o: &VerifyOptions) -> Res<Measure> {
    let mut worst: f64 = 0.0;
    for seed in 0..o.seeds {
        let p = dist_problem(seed)?;
        let m = 1 + (seed % 6) as usize;
        let rounds = 1 + (seed % 17) as usize;
        let part = partition(&p, m, 0.0, seed)?;
        let run = run_distributed(&part, &DistConfig { max_iter: rounds, stop_tau: 0.0, ..DistConfig::default() })?;
        let expected = (run.rounds * m * (p.d() + p.d_prime()) * p.n_prime()) as f64;
        worst = worst.max((run.ledger.total() as f64 - expected).abs());
    }
    measure(worst, 0.0, "|ledger total - rounds M (d + d') n'| in floats")
}

fn accelerated_equals_plain(o: &VerifyOptions) -> Res<Measure> {
    let mut worst: f64 = 0.0;
    let mut froze = 0usize;
    for seed in 0..o.seeds {
        let p = dist_problem(seed)?;
        let part = partition(&p, 1 + (seed % 4) as usize, 0.0, seed)?;
        let freeze_tol = 64.0 * p.d() as f64 * EPS;
        let base = DistConfig { max_iter: 60, stop_tau: 0.0, freeze_tol, ..DistConfig::default() };
        let plain = run_distributed(&part, &base)?;
        let acc = run_distributed(&part, &DistConfig { accelerated: true, ..base })?;
        froze += usize::from(acc.frozen_at.is_some());
        worst = worst.max(rel_diff(&acc.d, &plain.d));
        for (a, b) in acc.trace.errors().iter().zip(plain.trace.errors()) {
            worst = worst.max((a - b).abs());
        }
    }
    measure(worst, 1e-12, format!("{froze}/{} runs froze at kappa - 1 < 64 d EPS; max difference of D and of the error trace", o.seeds))
}

fn parallel_determinism(o: &VerifyOptions) -> Res<Measure> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(o.threads.max(2)).build()?;
    let mut mismatches = 0usize;
    for seed in 0..o.seeds.min(10) {
        let part = partition(&dist_problem(seed)?, 2 + (seed % 4) as usize, 0.0, seed)?;
        let serial = run_distributed(&part, &DistConfig { max_iter: 15, ..DistConfig::default() })?;
        let par = pool.install(|| run_distributed(&part, &DistConfig { max_iter: 15, parallel: true, ..DistConfig::default() }))?;
        mismatches += usize::from(serial.d != par.d || serial.trace.errors() != par.trace.errors());
    }
    measure(mismatches as f64, 0.0, "runs whose parallel result differs bitwise from the serial one")
}

fn sketch_orthogonality(o: &VerifyOptions) -> Res<Measure> {
    let mut worst: f64 = 0.0;
    for seed in 0..o.seeds {
        let n = 4 + (seed % 60) as usize;
        for iter in 0..5 {
            let r = 1 + (seed as usize * 7 + iter) % n;
            worst = worst.max(sample_sketch(n, r, seed, iter)?.orthogonality_defect());
        }
    }
    measure(worst, 1e-10, "max |S^T S - I_r| over fresh draws")
}

/// Monte-Carlo mean of `(AS)(AS)^T(AS)S^T = A P A^T A P` against its exact expectation.
///
/// For a uniformly random rank-`r` projector `P` on `R^n` and symmetric `G`,
/// `E[P G P] = (a + b) G + b tr(G) I` with
/// `a = r(nr + r - 2) / (n(n-1)(n+2))`, `b = r(n - r) / (n(n-1)(n+2))`.
fn expected_step(_: &VerifyOptions) -> Res<Measure> {
    let (d, n, draws) = (16, 16, 500);
    let p = svd(d, n, d, 10.0, 7)?;
    let a = p.a.scale(1.0 / power_iteration(&p.a, POWER_TOL, POWER_MAX_ITER)?.value.sqrt());
    let g = a.t_matmul(&a);
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    for r in [n / 2] {
        let mut mean = Mat::zeros(d, n);
        for it in 0..draws {
            let s = sample_sketch(n, r, 11, it)?.s;
            let a_s = a.matmul(&s);
            mean.axpy(1.0 / draws as f64, &a_s.gram_rows().matmul(&a_s).matmul_t(&s));
        }
        let (nf, rf) = (n as f64, r as f64);
        let den = nf * (nf - 1.0) * (nf + 2.0);
        let ca = rf * (nf * rf + rf - 2.0) / den;
        let cb = rf * (nf - rf) / den;
        let mut expect = a.matmul(&g).scale(ca + cb);
        expect.axpy(cb * g.trace(), &a);
        let dev = rel_diff(&mean, &expect);
        let central = a.matmul(&g).scale(rf / nf);
        details.push(format!("r={r}: {dev:.3} vs exact, {:.3} vs (r/n) A A^T A", rel_diff(&mean, &central)));
        worst = worst.max(dev);
    }
    measure(worst, 0.10, format!("{draws} sketches on 16x16, Frobenius-relative; {}", details.join("; ")))
}

/// Errors at or below this are roundoff and excluded from the monotonicity check.
const MONOTONE_FLOOR: f64 = 1e-12;

fn sketched_monotone_error(_: &VerifyOptions) -> Res<Measure> {
    let n = 16;
    let mut worst: f64 = 0.0;
    let (mut runs, mut offending) = (0usize, 0usize);
    for seed in 0..50u64 {
        for kappa in [10.0, 1e2, 1e3] {
            let p = svd(n, n, n, kappa, seed)?;
            for r in [n / 8, n / 4, n / 2, n] {
                let cfg = SketchConfig { seed, max_iter: 150, wall_clock: false, ..SketchConfig::default() };
                let e = run_sketched(&p, r, &cfg)?.trace.errors();
                runs += 1;
                let mut bad = false;
                for w in e.windows(2).skip(1) {
                    if w[0] > MONOTONE_FLOOR {
                        let rise = w[1] / w[0] - 1.0;
                        worst = worst.max(rise);
                        bad |= rise > 0.0;
                    }
                }
                offending += usize::from(bad);
            }
        }
    }
    measure(
        worst,
        0.0,
        format!("{offending}/{runs} runs (50 seeds, kappa <= 1e3, r >= n/8) rise after iteration 1; max relative rise"),
    )
}

fn gd_objective_monotone(o: &VerifyOptions) -> Res<Measure> {
    let mut worst: f64 = 0.0;
    for seed in 0..o.seeds.min(10) {
        let rank = if seed % 3 == 2 { 4 } else { 8 };
        let p = svd(8, 12, rank, 2.0 + 5.0 * seed as f64, seed)?;
        let cfg = BaselineConfig { max_iter: 300, tol: 0.0, wall_clock: false, ..BaselineConfig::default() };
        let (_, tr) = gd_run(&p.a, &p.b, &p.c, GdMode::Central, &cfg)?;
        let obj: Vec<f64> = tr.rows.iter().filter_map(|r| r.objective).collect();
        for w in obj.windows(2) {
            worst = worst.max((w[1] - w[0]) / obj[0]);
        }
    }
    measure(worst, 1e-12, "max objective increase per GD step, relative to the initial objective")
}

fn cg_residual_orthogonality(o: &VerifyOptions) -> Res<Measure> {
    let mut worst: f64 = 0.0;
    for seed in 0..o.seeds {
        let p = svd(16, 24, 16, 10.0, seed)?;
        let cfg = BaselineConfig { max_iter: 12, tol: 0.0, wall_clock: false, ..BaselineConfig::default() };
        let (_, tr) = cg_run(&p.a, &p.b, &p.c, &cfg)?;
        for c in tr.rows.iter().filter_map(|r| r.resid_corr) {
            worst = worst.max(c.abs());
        }
    }
    measure(worst, 1e-8, "max |<R_(k+1), R_k>| / |R_k|^2, kappa = 10, first 12 steps")
}

fn baseline_agreement(o: &VerifyOptions) -> Res<Measure> {
    let mut worst: f64 = 0.0;
    let target = 1e-8;
    for seed in 0..o.seeds.min(8) {
        let p = svd(16, 24, 16, 10.0, seed)?;
        let cfg = BaselineConfig { target: Some(target), wall_clock: false, seed, ..BaselineConfig::default() };
        for mode in [GdMode::Central, GdMode::Stochastic { r: 12 }] {
            let (_, tr) = gd_run(&p.a, &p.b, &p.c, mode, &cfg)?;
            worst = worst.max(tr.rows.last().map_or(f64::INFINITY, |r| r.err_oracle) / target);
        }
        let (_, tr) = cg_run(&p.a, &p.b, &p.c, &cfg)?;
        worst = worst.max(tr.rows.last().map_or(f64::INFINITY, |r| r.err_oracle) / target);
    }
    measure(worst, 1.0, "max final error / 1e-8 over GD, stochastic GD and CG")
}

const DETERMINISM_SPEC: &str = "\
[experiment]
name = determinism
regime = central
solvers = eagle, cg, gd
seeds = 0..4
eps = 1e-8
max_iter = 400
wall_clock = false
diagnostics = true

[problem]
d = 16
n = 20

[sweep]
axis = kappa
values = 10, 100
";

fn dir_contents(dir: &Path) -> Res<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        out.insert(entry.file_name().to_string_lossy().into_owned(), fs::read(entry.path())?);
    }
    Ok(out)
}

fn csv_determinism(o: &VerifyOptions) -> Res<Measure> {
    let spec = parse_spec(DETERMINISM_SPEC, Preset::Ci)?;
    let mut outputs = Vec::new();
    for threads in [1, 1, o.threads.max(2)] {
        let dir = tempfile::tempdir()?;
        let summary = run_experiment(&spec, dir.path(), threads)?;
        if !summary.all_completed() {
            return Err(summary.failures.join("; ").into());
        }
        outputs.push(dir_contents(dir.path())?);
    }
    let differing = outputs[1..].iter().filter(|o| **o != outputs[0]).count();
    measure(
        differing as f64,
        0.0,
        format!("{} files; repeat on 1 thread and a run on {} threads compared byte for byte", outputs[0].len(), o.threads.max(2)),
    )
}

fn summary_self_consistency(_: &VerifyOptions) -> Res<Measure> {
    let spec = parse_spec(DETERMINISM_SPEC, Preset::Ci)?;
    let dir = tempfile::tempdir()?;
    let summary = run_experiment(&spec, dir.path(), 2)?;
    let written = read_summary(fs::File::open(dir.path().join(summary_file_name(&spec)))?)?;
    let mut worst: f64 = 0.0;
    let mut groups = 0usize;
    for file in &summary.trace_files {
        let rows = read_csv(file)?;
        let Some(first) = rows.first() else { continue };
        groups += 1;
        let mut per_seed: BTreeMap<u64, Vec<(u64, f64, u64)>> = BTreeMap::new();
        for r in &rows {
            per_seed.entry(r.seed).or_default().push((r.iter, r.rel_err, r.wall_ns));
        }
        let mut hits = Vec::new();
        let mut hit_walls = Vec::new();
        let mut finals = Vec::new();
        for run in per_seed.values() {
            if let Some(&(it, _, w)) = run.iter().find(|x| x.1 <= spec.eps) {
                hits.push(it as f64);
                hit_walls.push(w as f64);
            }
            finals.push(run[run.len() - 1].1);
        }
        let row: &SummaryRow = written
            .iter()
            .find(|s| s.solver == first.solver && s.sweep_value == first.sweep_value)
            .ok_or("summary row missing")?;
        let avg = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
        let mid = |v: &[f64]| {
            let mut s = v.to_vec();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            match s.len() {
                0 => None,
                k if k % 2 == 1 => Some(s[k / 2]),
                k => Some((s[k / 2 - 1] + s[k / 2]) / 2.0),
            }
        };
        let diff = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (None, None) => 0.0,
            (Some(x), Some(y)) => (x - y).abs() / y.abs().max(f64::MIN_POSITIVE),
            _ => f64::INFINITY,
        };
        worst = worst
            .max(if row.seeds == per_seed.len() && row.reached == hits.len() { 0.0 } else { f64::INFINITY })
            .max(diff(row.mean_iters, avg(&hits)))
            .max(diff(row.median_iters, mid(&hits)))
            .max(diff(row.mean_wall_ns, avg(&hit_walls)))
            .max(diff(row.median_wall_ns, mid(&hit_walls)))
            .max(diff(Some(row.mean_final_err), avg(&finals)))
            .max(diff(Some(row.median_final_err), mid(&finals)));
    }
    measure(worst, 1e-12, format!("{groups} trace files re-aggregated; max relative difference to the summary CSV"))
}
