//! Sweep execution, per-(point, solver) trace files and the summary table.

use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use eagle_core::dist::{run_distributed, DistConfig, DistError};
use eagle_core::eagle::{
    d_increment, estim_step, rel_diff, run_centralized, EagleError, EstimConfig, EstimState, IterRecord, SolverConfig,
};
use eagle_core::matcore::least_squares_min_norm;
use eagle_core::problemgen::{add_noise, diversity_index, generate, partition, BlockProblem, Diversity, GenError};
use eagle_core::reference::{cg_run, gd_distributed, gd_run, nystrom_solve, BaselineConfig, BaselineTrace, GdMode, RefError};
use eagle_core::sketch::{run_sketched, SketchConfig, SketchError};
use rayon::prelude::*;
use thiserror::Error;

use crate::rows::{emit_csv, fmt_f64, CsvError, ResultRow};
use crate::spec::{ExperimentSpec, Point, Regime, SolverKind};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Eagle(#[from] EagleError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error(transparent)]
    Ref(#[from] RefError),
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

pub fn run_id(spec: &ExperimentSpec, solver: SolverKind, value: f64, seed: u64) -> String {
    format!("{}-{}-{}{}-s{}", spec.name, solver, spec.sweep.axis, value, seed)
}

/// Problem for one seed at one sweep point, noise included.
pub fn build_problem(point: &Point, seed: u64) -> Result<BlockProblem, RunError> {
    let p = generate(&point.gen, seed)?;
    Ok(if point.noise > 0.0 { add_noise(&p, point.noise) } else { p })
}

/// Distributed runs report `alpha`, or `alpha_span` when the shard spans miss part of `R^d`.
pub fn alpha_of(div: &Diversity) -> f64 {
    if div.degenerate {
        div.alpha_span
    } else {
        div.alpha
    }
}

struct Ctx<'a> {
    spec: &'a ExperimentSpec,
    point: &'a Point,
    solver: SolverKind,
    seed: u64,
}

impl Ctx<'_> {
    fn row(&self, iter: u64, rel_err: f64, wall_ns: u64) -> ResultRow {
        ResultRow {
            run_id: run_id(self.spec, self.solver, self.point.value, self.seed),
            regime: self.spec.regime,
            solver: self.solver,
            seed: self.seed,
            sweep_value: self.point.value,
            iter,
            rel_err,
            lambda_bar: None,
            kappa_l: None,
            theta_l: None,
            wall_ns,
            flops: None,
            comm_floats_cum: 0,
            alpha_measured: None,
        }
    }

    fn from_trace(&self, recs: &[IterRecord], with_flops: bool) -> Vec<ResultRow> {
        recs.iter()
            .map(|r| {
                let mut row = self.row(r.iter as u64, r.err_oracle.unwrap_or(f64::NAN), r.wall_ns);
                if let Some(s) = r.spectrum {
                    row.lambda_bar = Some(s.lambda_bar);
                    row.kappa_l = Some(s.kappa);
                    row.theta_l = Some(s.theta);
                }
                row.flops = with_flops.then_some(r.flops);
                row.comm_floats_cum = r.comm_floats_cum;
                row
            })
            .collect()
    }

    fn from_baseline(&self, tr: &BaselineTrace) -> Vec<ResultRow> {
        tr.rows
            .iter()
            .map(|r| {
                let mut row = self.row(r.iter as u64, r.err_oracle, r.wall_ns);
                row.comm_floats_cum = r.comm_floats_cum;
                row
            })
            .collect()
    }

    fn baseline_cfg(&self) -> BaselineConfig {
        BaselineConfig {
            max_iter: self.spec.max_iter,
            target: Some(self.spec.eps),
            seed: self.seed,
            wall_clock: self.spec.wall_clock,
            ..BaselineConfig::default()
        }
    }
}

fn oracle_row(ctx: &Ctx, p: &BlockProblem) -> Result<Vec<ResultRow>, RunError> {
    let t0 = Instant::now();
    nystrom_solve(&p.a, &p.b, &p.c)?;
    Ok(vec![ctx.row(0, 0.0, t0.elapsed().as_nanos() as u64)])
}

fn estimation_rows(ctx: &Ctx, p: &BlockProblem) -> Result<Vec<ResultRow>, RunError> {
    let s = ctx.point.step_scale;
    let base = EstimConfig::default();
    let cfg = EstimConfig { eta: base.eta * s, gamma: base.gamma * s, max_iter: ctx.spec.max_iter, ..base };
    let w_star = least_squares_min_norm(&p.a, &p.b);
    let mut state = EstimState::new(&p.a, &p.b);
    let mut rows = vec![ctx.row(0, rel_diff(&state.w, &w_star), 0)];
    let mut wall = 0u64;
    while state.l < cfg.max_iter {
        let t0 = Instant::now();
        let next = estim_step(&state, &cfg)?;
        wall += t0.elapsed().as_nanos() as u64;
        let inc = d_increment(&next.w, &state.w);
        state = next;
        rows.push(ctx.row(state.l as u64, rel_diff(&state.w, &w_star), wall));
        if inc < cfg.stop_tau {
            break;
        }
    }
    Ok(rows)
}

/// All rows for one run.
pub fn run_one(spec: &ExperimentSpec, point: &Point, solver: SolverKind, seed: u64) -> Result<Vec<ResultRow>, RunError> {
    let ctx = Ctx { spec, point, solver, seed };
    let p = build_problem(point, seed)?;
    let (eta, gamma) = (point.step_scale / 3.0, point.step_scale);
    let mut rows = match (spec.regime, solver) {
        (Regime::Central, SolverKind::Eagle) => {
            let cfg =
                SolverConfig { eta, gamma, max_iter: spec.max_iter, track_diagnostics: spec.diagnostics, ..SolverConfig::default() };
            ctx.from_trace(&run_centralized(&p, &cfg)?.trace.rows, true)
        }
        (Regime::Central, SolverKind::Gd) => ctx.from_baseline(&gd_run(&p.a, &p.b, &p.c, GdMode::Central, &ctx.baseline_cfg())?.1),
        (Regime::Central, SolverKind::Cg) => ctx.from_baseline(&cg_run(&p.a, &p.b, &p.c, &ctx.baseline_cfg())?.1),
        (Regime::Distributed, s) => {
            let part = partition(&p, point.machines, point.overlap, seed)?;
            let (mut rows, alpha) = if s == SolverKind::Oracle {
                (oracle_row(&ctx, &p)?, alpha_of(&diversity_index(&part.shard_blocks())?))
            } else if s == SolverKind::Eagle {
                let cfg = DistConfig {
                    eta,
                    gamma,
                    max_iter: spec.max_iter,
                    accelerated: spec.accelerated,
                    track_diagnostics: spec.diagnostics,
                    ..DistConfig::default()
                };
                let run = run_distributed(&part, &cfg)?;
                (ctx.from_trace(&run.trace.rows, false), alpha_of(&run.diversity))
            } else {
                let alpha = alpha_of(&diversity_index(&part.shard_blocks())?);
                (ctx.from_baseline(&gd_distributed(&part, &ctx.baseline_cfg())?.1), alpha)
            };
            for r in &mut rows {
                r.alpha_measured = Some(alpha);
            }
            rows
        }
        (_, SolverKind::Oracle) => oracle_row(&ctx, &p)?,
        (Regime::Sketched, SolverKind::Eagle) => {
            let cfg = SketchConfig {
                eta,
                gamma,
                max_iter: spec.max_iter,
                seed,
                track_diagnostics: spec.diagnostics,
                wall_clock: spec.wall_clock,
                ..SketchConfig::default()
            };
            ctx.from_trace(&run_sketched(&p, point.r, &cfg)?.trace.rows, true)
        }
        (Regime::Sketched, SolverKind::Gd) => {
            ctx.from_baseline(&gd_run(&p.a, &p.b, &p.c, GdMode::Stochastic { r: point.r }, &ctx.baseline_cfg())?.1)
        }
        (Regime::Estimation, SolverKind::Eagle) => estimation_rows(&ctx, &p)?,
        (regime, s) => unreachable!("solver {s} rejected for {regime} at parse time"),
    };
    if !spec.wall_clock {
        for r in &mut rows {
            r.wall_ns = 0;
        }
    }
    Ok(rows)
}

/// Trace file name for one (sweep value, solver) pair.
pub fn trace_file_name(spec: &ExperimentSpec, value: f64, solver: SolverKind) -> String {
    format!("{}__{}_{}__{}.csv", spec.name, spec.sweep.axis, value, solver)
}

pub fn summary_file_name(spec: &ExperimentSpec) -> String {
    format!("{}__summary.csv", spec.name)
}

pub const SUMMARY_FIELDS: [&str; 11] = [
    "sweep_value",
    "solver",
    "seeds",
    "reached",
    "mean_iters",
    "median_iters",
    "mean_wall_ns",
    "median_wall_ns",
    "mean_final_err",
    "median_final_err",
    "eps",
];

/// Aggregate over seeds of one (sweep value, solver) pair. Iteration and time
/// statistics cover the seeds that reached `eps`; the final-error statistics
/// cover all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub sweep_value: f64,
    pub solver: SolverKind,
    pub seeds: usize,
    pub reached: usize,
    pub mean_iters: Option<f64>,
    pub median_iters: Option<f64>,
    pub mean_wall_ns: Option<f64>,
    pub median_wall_ns: Option<f64>,
    pub mean_final_err: f64,
    pub median_final_err: f64,
    pub eps: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Summary for the rows of one (sweep value, solver) pair, grouped by seed in order of appearance.
pub fn summarize(rows: &[ResultRow], eps: f64) -> Option<SummaryRow> {
    let first = rows.first()?;
    let mut seeds: Vec<u64> = Vec::new();
    for r in rows {
        if !seeds.contains(&r.seed) {
            seeds.push(r.seed);
        }
    }
    let (mut iters, mut walls, mut finals) = (Vec::new(), Vec::new(), Vec::new());
    for &s in &seeds {
        let run: Vec<&ResultRow> = rows.iter().filter(|r| r.seed == s).collect();
        if let Some(hit) = run.iter().find(|r| r.rel_err <= eps) {
            iters.push(hit.iter as f64);
            walls.push(hit.wall_ns as f64);
        }
        finals.push(run.last().map_or(f64::NAN, |r| r.rel_err));
    }
    let stat = |v: &[f64], f: fn(&[f64]) -> f64| (!v.is_empty()).then(|| f(v));
    Some(SummaryRow {
        sweep_value: first.sweep_value,
        solver: first.solver,
        seeds: seeds.len(),
        reached: iters.len(),
        mean_iters: stat(&iters, mean),
        median_iters: stat(&iters, median),
        mean_wall_ns: stat(&walls, mean),
        median_wall_ns: stat(&walls, median),
        mean_final_err: mean(&finals),
        median_final_err: median(&finals),
        eps,
    })
}

pub fn write_summary(rows: &[SummaryRow], w: impl Write) -> Result<(), CsvError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_FIELDS)?;
    let opt = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
    for r in rows {
        out.write_record([
            fmt_f64(r.sweep_value),
            r.solver.name().to_string(),
            r.seeds.to_string(),
            r.reached.to_string(),
            opt(r.mean_iters),
            opt(r.median_iters),
            opt(r.mean_wall_ns),
            opt(r.median_wall_ns),
            fmt_f64(r.mean_final_err),
            fmt_f64(r.median_final_err),
            fmt_f64(r.eps),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_summary(r: impl Read) -> Result<Vec<SummaryRow>, CsvError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    if header.iter().ne(SUMMARY_FIELDS) {
        return Err(CsvError::Header { expected: SUMMARY_FIELDS.join(","), found: header.iter().collect::<Vec<_>>().join(",") });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let err = |k: usize| CsvError::Value { record: i + 1, field: SUMMARY_FIELDS[k], value: field(k).to_string() };
        let num = |k: usize| field(k).parse::<f64>().map_err(|_| err(k));
        let int = |k: usize| field(k).parse::<usize>().map_err(|_| err(k));
        let opt = |k: usize| if field(k).is_empty() { Ok(None) } else { num(k).map(Some) };
        out.push(SummaryRow {
            sweep_value: num(0)?,
            solver: SolverKind::parse(field(1)).ok_or_else(|| err(1))?,
            seeds: int(2)?,
            reached: int(3)?,
            mean_iters: opt(4)?,
            median_iters: opt(5)?,
            mean_wall_ns: opt(6)?,
            median_wall_ns: opt(7)?,
            mean_final_err: num(8)?,
            median_final_err: num(9)?,
            eps: num(10)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub rows: Vec<SummaryRow>,
    pub trace_files: Vec<PathBuf>,
    pub summary_file: PathBuf,
    /// `run_id: error` for every run that did not complete.
    pub failures: Vec<String>,
}

impl ExperimentSummary {
    pub fn all_completed(&self) -> bool {
        self.failures.is_empty()
    }
}

struct GroupResult {
    summary: Option<SummaryRow>,
    file: PathBuf,
    failures: Vec<String>,
}

fn run_group(spec: &ExperimentSpec, value: f64, solver: SolverKind, out_dir: &Path) -> Result<GroupResult, RunnerError> {
    let point = spec.point(value);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &seed in &spec.seeds {
        match run_one(spec, &point, solver, seed) {
            Ok(r) => rows.extend(r),
            Err(e) => failures.push(format!("{}: {e}", run_id(spec, solver, value, seed))),
        }
    }
    let file = out_dir.join(trace_file_name(spec, value, solver));
    emit_csv(&rows, &file)?;
    Ok(GroupResult { summary: summarize(&rows, spec.eps), file, failures })
}

/// Run every (sweep value, solver, seed) of `spec`, writing one trace CSV per
/// (sweep value, solver) and the summary CSV into `out_dir`.
///
/// Each (sweep value, solver) pair is one pool task that owns its trace file;
/// the summary is written after all tasks finish. `threads = 0` uses the rayon
/// default.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path, threads: usize) -> Result<ExperimentSummary, RunnerError> {
    fs::create_dir_all(out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let groups: Vec<(f64, SolverKind)> =
        spec.sweep.values.iter().flat_map(|&v| spec.solvers.iter().map(move |&s| (v, s))).collect();
    let results: Vec<GroupResult> =
        pool.install(|| groups.par_iter().map(|&(v, s)| run_group(spec, v, s, out_dir)).collect::<Result<_, _>>())?;
    let summary_file = out_dir.join(summary_file_name(spec));
    let mut summary = ExperimentSummary { rows: Vec::new(), trace_files: Vec::new(), summary_file, failures: Vec::new() };
    for g in results {
        summary.rows.extend(g.summary);
        summary.trace_files.push(g.file);
        summary.failures.extend(g.failures);
    }
    write_summary(&summary.rows, File::create(&summary.summary_file)?)?;
    Ok(summary)
}
