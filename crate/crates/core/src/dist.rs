//! Distributed EAGLE over a star topology.
//!
//! Each worker owns a column shard `(A^mu, B^mu)` and a replica of `(C, D)`.
//! A round is: every worker runs the local update and emits its proposed
//! `(C'^mu, D'^mu)`; the aggregator averages them in machine-id order and
//! broadcasts the result. The ledger counts every float that crosses the
//! network.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::eagle::{d_increment, rel_diff, update_blocks, EagleError, IterRecord, Oracle, RunStatus, Spectrum, Trace};
use crate::matcore::{small_gram_eig, sym_eig, Mat, MatError};
use crate::problemgen::{diversity_index, Diversity, GenError, Partition};

#[derive(Debug, Error)]
pub enum DistError {
    #[error("worker {0} used before normalization")]
    NotNormalized(usize),
    #[error("no message from machine {0}")]
    MissingMessage(usize),
    #[error("duplicate message from machine {0}")]
    DuplicateMessage(usize),
    #[error(transparent)]
    Eagle(#[from] EagleError),
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistRho {
    /// `rho_l = (9/4)^l` on unscaled shards.
    Schedule,
    /// `rho = 1`, shards rescaled by 3/2 after every unfrozen round.
    Rescale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistConfig {
    pub eta: f64,
    pub gamma: f64,
    pub rho: DistRho,
    pub stop_tau: f64,
    pub max_iter: usize,
    pub accelerated: bool,
    /// Freeze once every shard has `kappa(A^mu) - 1` below this.
    pub freeze_tol: f64,
    /// Run local updates on the rayon pool.
    pub parallel: bool,
    pub track_error: bool,
    /// Spectrum of the average energy `M^-1 sum A^mu A^mu^T` per round.
    pub track_diagnostics: bool,
}

impl Default for DistConfig {
    fn default() -> Self {
        Self {
            eta: 1.0 / 3.0,
            gamma: 1.0,
            rho: DistRho::Rescale,
            stop_tau: 1e-12,
            max_iter: 200,
            accelerated: false,
            freeze_tol: 1e-8,
            parallel: false,
            track_error: true,
            track_diagnostics: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerState {
    pub mu: usize,
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
    pub frozen: bool,
    /// Joint `(A, B)` factor applied at setup, `1 / ||A^mu_0||_2`.
    pub scale: f64,
    /// Rank of `A^mu_0`, fixed at setup.
    pub rank: usize,
    normalized: bool,
}

impl WorkerState {
    /// Worker with `(A, B)` jointly scaled so that `||A||_2 = 1`.
    pub fn setup(mu: usize, a: &Mat, b: &Mat, c: &Mat) -> Result<Self, DistError> {
        let eig = small_gram_eig(a)?;
        if eig.top() <= 0.0 {
            return Err(MatError::ZeroMatrix.into());
        }
        let scale = 1.0 / eig.top().sqrt();
        let a = a.scale(scale);
        let rank = eig.rank();
        Ok(Self {
            mu,
            b: b.scale(scale),
            a,
            c: c.clone(),
            d: Mat::zeros(b.rows(), c.cols()),
            frozen: false,
            scale,
            rank,
            normalized: true,
        })
    }

    /// Worker without the setup normalization; `local_update` rejects it.
    pub fn raw(mu: usize, a: &Mat, b: &Mat, c: &Mat) -> Self {
        Self {
            mu,
            a: a.clone(),
            b: b.clone(),
            c: c.clone(),
            d: Mat::zeros(b.rows(), c.cols()),
            frozen: false,
            scale: 1.0,
            rank: a.rows().min(a.cols()),
            normalized: false,
        }
    }

    /// `kappa(A^mu) - 1` over the nonzero spectrum.
    pub fn theta(&self) -> Result<f64, DistError> {
        let eig = small_gram_eig(&self.a)?;
        Ok(Spectrum::from_values(&eig.values, self.rank).theta)
    }
}


#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub from: usize,
    pub c_contrib: Mat,
    pub d_contrib: Mat,
    pub floats: u64,
}

impl RoundMessage {
    pub fn new(from: usize, c_contrib: Mat, d_contrib: Mat) -> Self {
        let floats = (c_contrib.data().len() + d_contrib.data().len()) as u64;
        Self { from, c_contrib, d_contrib, floats }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommLedger {
    /// `per_round[round][machine]` floats sent.
    pub per_round: Vec<Vec<u64>>,
    pub cumulative: Vec<u64>,
}

impl CommLedger {
    pub fn new(machines: usize) -> Self {
        Self { per_round: Vec::new(), cumulative: vec![0; machines] }
    }

    pub fn record(&mut self, messages: &[RoundMessage]) {
        let mut row = vec![0; self.cumulative.len()];
        for m in messages {
            row[m.from] += m.floats;
            self.cumulative[m.from] += m.floats;
        }
        self.per_round.push(row);
    }

    pub fn rounds(&self) -> usize {
        self.per_round.len()
    }

    pub fn total(&self) -> u64 {
        self.cumulative.iter().sum()
    }
}

/// Local update with step scale `rho_l`. A frozen worker keeps `(A, B)` and
/// still proposes `(C', D')`.
pub fn local_update(w: &WorkerState, rho_l: f64, rescale: bool, cfg: &DistConfig) -> Result<(WorkerState, RoundMessage), DistError> {
    if !w.normalized {
        return Err(DistError::NotNormalized(w.mu));
    }
    let (eta_l, gamma_l) = (cfg.eta * rho_l, cfg.gamma * rho_l);
    let mut next = w.clone();
    let (c1, d1) = if w.frozen {
        update_cd(&w.a, &w.b, &w.c, &w.d, gamma_l)
    } else {
        let (mut a1, mut b1, c1, d1) = update_blocks(&w.a, &w.b, &w.c, &w.d, eta_l, gamma_l);
        if rescale {
            a1 = a1.scale(1.5);
            b1 = b1.scale(1.5);
        }
        next.a = a1;
        next.b = b1;
        (c1, d1)
    };
    let msg = RoundMessage::new(w.mu, c1, d1);
    Ok((next, msg))
}

/// `(C', D')` only, by the Gram route.
fn update_cd(a: &Mat, b: &Mat, c: &Mat, d: &Mat, gamma_l: f64) -> (Mat, Mat) {
    let atc = a.t_matmul(c);
    let mut c1 = c.clone();
    let mut d1 = d.clone();
    c1.axpy(-gamma_l, &a.matmul(&atc));
    d1.axpy(gamma_l, &b.matmul(&atc));
    (c1, d1)
}

/// Mean of the contributions, summed in machine-id order.
pub fn fuse(messages: &[RoundMessage], machines: usize) -> Result<(Mat, Mat), DistError> {
    let mut slots: Vec<Option<&RoundMessage>> = vec![None; machines];
    for m in messages {
        if m.from >= machines {
            return Err(DistError::MissingMessage(m.from));
        }
        if slots[m.from].is_some() {
            return Err(DistError::DuplicateMessage(m.from));
        }
        slots[m.from] = Some(m);
    }
    let first = slots[0].ok_or(DistError::MissingMessage(0))?;
    let mut c = first.c_contrib.clone();
    let mut d = first.d_contrib.clone();
    for (mu, slot) in slots.iter().enumerate().skip(1) {
        let m = slot.ok_or(DistError::MissingMessage(mu))?;
        c.axpy(1.0, &m.c_contrib);
        d.axpy(1.0, &m.d_contrib);
    }
    let mf = machines as f64;
    let c = Mat::from_fn(c.rows(), c.cols(), |i, j| c.get(i, j) / mf);
    let d = Mat::from_fn(d.rows(), d.cols(), |i, j| d.get(i, j) / mf);
    Ok((c, d))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundLogRow {
    pub round: usize,
    pub machine: usize,
    pub floats_sent: u64,
    pub frozen: bool,
}

pub fn write_round_log(rows: &[RoundLogRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "round,machine,floats_sent,frozen_flag")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.round, r.machine, r.floats_sent, u8::from(r.frozen))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DistRun {
    pub d: Mat,
    pub trace: Trace,
    pub ledger: CommLedger,
    pub status: RunStatus,
    pub rounds: usize,
    pub diversity: Diversity,
    /// Round at which all workers froze, if they did.
    pub frozen_at: Option<usize>,
    pub round_log: Vec<RoundLogRow>,
    pub workers: Vec<WorkerState>,
}

fn mean_energy(workers: &[WorkerState]) -> Mat {
    let d = workers[0].a.rows();
    let mut e = Mat::zeros(d, d);
    for w in workers {
        e.axpy(1.0, &w.a.gram_rows());
    }
    e.scale(1.0 / workers.len() as f64)
}

pub fn run_distributed(part: &Partition, cfg: &DistConfig) -> Result<DistRun, DistError> {
    let m = part.machines();
    let mut workers: Vec<WorkerState> = part
        .shards
        .iter()
        .enumerate()
        .map(|(mu, s)| WorkerState::setup(mu, &s.a, &s.b, &part.c))
        .collect::<Result<_, _>>()?;
    let diversity = diversity_index(&part.shard_blocks())?;
    let mut trace = Trace { c0: Some(part.c.clone()), ..Trace::default() };
    if cfg.track_error {
        let a = Mat::hcat(&part.shards.iter().map(|s| &s.a).collect::<Vec<_>>());
        let b = Mat::hcat(&part.shards.iter().map(|s| &s.b).collect::<Vec<_>>());
        trace.oracle = Some(Oracle::new(&a, &b, &part.c));
    }
    let rank_bar = if cfg.track_diagnostics { sym_eig(&mean_energy(&workers))?.rank() } else { 0 };
    let mut ledger = CommLedger::new(m);
    let mut round_log = Vec::new();
    let mut d = Mat::zeros(part.d_hidden.rows(), part.c.cols());
    let push_row = |trace: &mut Trace, iter: usize, d: &Mat, workers: &[WorkerState], wall: u64, comm: u64| -> Result<(), DistError> {
        let spectrum = if cfg.track_diagnostics { Some(Spectrum::of(&mean_energy(workers), rank_bar)?) } else { None };
        trace.rows.push(IterRecord {
            iter,
            err_oracle: trace.oracle.as_ref().map(|o| o.rel_err(d)),
            err_truth: rel_diff(d, &part.d_hidden),
            spectrum,
            rho: None,
            wall_ns: wall,
            flops: 0,
            comm_floats_cum: comm,
        });
        Ok(())
    };
    push_row(&mut trace, 0, &d, &workers, 0, 0)?;
    let mut rho_l = 1.0;
    let mut frozen_at = None;
    let mut status = RunStatus::MaxIterExceeded;
    let mut wall = 0u64;
    let mut round = 0;
    while round < cfg.max_iter {
        let t0 = Instant::now();
        if let Some(r) = trace.rows.last_mut() {
            r.rho = Some(rho_l);
        }
        let all_frozen = workers.iter().all(|w| w.frozen);
        let rescale = cfg.rho == DistRho::Rescale && !all_frozen;
        let step = |w: &WorkerState| local_update(w, rho_l, rescale, cfg);
        let results: Vec<(WorkerState, RoundMessage)> = if cfg.parallel {
            workers.par_iter().map(step).collect::<Result<_, _>>()?
        } else {
            workers.iter().map(step).collect::<Result<_, _>>()?
        };
        let (mut next, messages): (Vec<WorkerState>, Vec<RoundMessage>) = results.into_iter().unzip();
        let (c1, d1) = fuse(&messages, m)?;
        ledger.record(&messages);
        for msg in &messages {
            round_log.push(RoundLogRow { round, machine: msg.from, floats_sent: msg.floats, frozen: workers[msg.from].frozen });
        }
        for w in &mut next {
            w.c = c1.clone();
            w.d = d1.clone();
        }
        if cfg.rho == DistRho::Schedule && !all_frozen {
            rho_l *= 9.0 / 4.0;
        }
        if cfg.accelerated && frozen_at.is_none() {
            let mut ok = true;
            for w in &next {
                if w.theta()? >= cfg.freeze_tol {
                    ok = false;
                    break;
                }
            }
            if ok {
                for w in &mut next {
                    w.frozen = true;
                }
                frozen_at = Some(round + 1);
            }
        }
        workers = next;
        let inc = d_increment(&d1, &d);
        d = d1;
        round += 1;
        wall += t0.elapsed().as_nanos() as u64;
        push_row(&mut trace, round, &d, &workers, wall, ledger.total())?;
        if inc < cfg.stop_tau {
            status = RunStatus::Converged;
            break;
        }
    }
    Ok(DistRun { d, trace, ledger, status, rounds: round, diversity, frozen_at, round_log, workers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eagle::{run_centralized, RhoPolicy, SolverConfig};
    use crate::problemgen::{generate, partition, BlockProblem, GenSpec};
    use crate::rng::Stream;

    fn gauss(r: usize, c: usize, seed: u64) -> Mat {
        let mut s = Stream::new(seed, "dist-test");
        Mat::from_fn(r, c, |_, _| s.gaussian())
    }

    fn noiseless(d: usize, n: usize, rank: usize, kappa: f64, seed: u64) -> BlockProblem {
        let mut spec = GenSpec::svd(d, n, 2, 2, rank, kappa);
        spec.c_in_span = true;
        generate(&spec, seed).unwrap()
    }

    #[test]
    fn frozen_worker_keeps_shard_and_still_sends() {
        let mut w = WorkerState::setup(0, &gauss(4, 6, 1), &gauss(2, 6, 2), &gauss(4, 2, 3)).unwrap();
        w.frozen = true;
        let (next, msg) = local_update(&w, 1.0, true, &DistConfig::default()).unwrap();
        assert_eq!(next.a, w.a);
        assert_eq!(next.b, w.b);
        assert_eq!(msg.floats, 12);
    }

    #[test]
    fn unnormalized_worker_rejected() {
        let w = WorkerState::raw(0, &gauss(3, 3, 1), &gauss(1, 3, 2), &gauss(3, 1, 3));
        assert!(matches!(local_update(&w, 1.0, true, &DistConfig::default()), Err(DistError::NotNormalized(0))));
    }

    #[test]
    fn message_size_for_wide_shard() {
        let msg = RoundMessage::new(3, Mat::zeros(1000, 2), Mat::zeros(2, 2));
        assert_eq!(msg.floats, 2004);
    }

    #[test]
    fn single_machine_matches_centralized_bitwise() {
        let p = noiseless(12, 16, 12, 30.0, 4);
        let part = partition(&p, 1, 0.0, 0).unwrap();
        let dist = run_distributed(&part, &DistConfig::default()).unwrap();
        let ccfg = SolverConfig { rho_policy: RhoPolicy::AnalyticRescale, ..SolverConfig::default() };
        let cent = run_centralized(&p, &ccfg).unwrap();
        assert_eq!(dist.rounds, cent.iterations);
        assert_eq!(dist.d, cent.d);
    }

    #[test]
    fn fuse_cases() {
        let c = gauss(3, 2, 5);
        let d = gauss(2, 2, 6);
        let msgs: Vec<RoundMessage> = (0..4).map(|mu| RoundMessage::new(mu, c.clone(), d.clone())).collect();
        let (fc, fd) = fuse(&msgs, 4).unwrap();
        assert!(fc.sub(&c).max_abs() < 1e-15);
        assert!(fd.sub(&d).max_abs() < 1e-15);

        let msgs: Vec<RoundMessage> = (0..3).map(|mu| RoundMessage::new(mu, gauss(3, 2, 10 + mu as u64), gauss(2, 2, 20 + mu as u64))).collect();
        let mut rev = msgs.clone();
        rev.reverse();
        let (fc, _) = fuse(&rev, 3).unwrap();
        let brute = Mat::from_fn(3, 2, |i, j| (msgs[0].c_contrib.get(i, j) + msgs[1].c_contrib.get(i, j) + msgs[2].c_contrib.get(i, j)) / 3.0);
        assert_eq!(fc, brute);

        assert!(matches!(fuse(&msgs[..2], 3), Err(DistError::MissingMessage(2))));
        assert!(matches!(fuse(&[msgs[0].clone(), msgs[0].clone()], 2), Err(DistError::DuplicateMessage(0))));
    }

    #[test]
    fn identical_shards_match_single_machine() {
        let p = noiseless(8, 10, 8, 20.0, 7);
        let shard = crate::problemgen::Shard { a: p.a.clone(), b: p.b.clone(), columns: (0..10).collect() };
        let three = Partition { shards: vec![shard.clone(), shard.clone(), shard], c: p.c.clone(), d_hidden: p.d_hidden.clone(), overlap: 0.0 };
        let one = partition(&p, 1, 0.0, 0).unwrap();
        let r3 = run_distributed(&three, &DistConfig::default()).unwrap();
        let r1 = run_distributed(&one, &DistConfig::default()).unwrap();
        assert_eq!(r3.rounds, r1.rounds);
        assert!(r3.d.sub(&r1.d).max_abs() <= 1e-14 * r1.d.max_abs());
    }

    #[test]
    fn ledger_and_replicas() {
        let p = noiseless(10, 30, 10, 20.0, 8);
        let part = partition(&p, 3, 0.0, 1).unwrap();
        let run = run_distributed(&part, &DistConfig::default()).unwrap();
        let per = (10 + 2) * 2;
        assert_eq!(run.ledger.total(), (run.rounds * 3 * per) as u64);
        assert!(run.ledger.per_round.iter().all(|r| r.iter().all(|f| *f == per as u64)));
        for w in &run.workers[1..] {
            assert_eq!(w.c, run.workers[0].c);
            assert_eq!(w.d, run.workers[0].d);
        }
        let mut buf = Vec::new();
        write_round_log(&run.round_log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("round,machine,floats_sent,frozen_flag\n0,0,24,0\n"));
    }

    #[test]
    fn parallel_workers_are_bitwise_identical() {
        let p = noiseless(10, 40, 10, 50.0, 9);
        let part = partition(&p, 4, 0.0, 2).unwrap();
        let serial = run_distributed(&part, &DistConfig::default()).unwrap();
        let par = run_distributed(&part, &DistConfig { parallel: true, ..DistConfig::default() }).unwrap();
        assert_eq!(serial.d, par.d);
        assert_eq!(serial.rounds, par.rounds);
    }

    #[test]
    fn accelerated_matches_plain() {
        let p = noiseless(6, 40, 6, 30.0, 10);
        let part = partition(&p, 4, 0.0, 3).unwrap();
        let cfg = DistConfig { stop_tau: 0.0, max_iter: 40, ..DistConfig::default() };
        let plain = run_distributed(&part, &cfg).unwrap();
        let fast = run_distributed(&part, &DistConfig { accelerated: true, ..cfg }).unwrap();
        let f = fast.frozen_at.expect("froze");
        for (x, y) in plain.trace.rows.iter().zip(&fast.trace.rows).skip(f) {
            let (ex, ey) = (x.err_oracle.unwrap(), y.err_oracle.unwrap());
            assert!((ex - ey).abs() <= 1e-7, "{ex} vs {ey}");
        }
    }

    #[test]
    fn schedule_and_rescale_agree() {
        let p = noiseless(8, 24, 8, 20.0, 11);
        let part = partition(&p, 2, 0.0, 4).unwrap();
        let a = run_distributed(&part, &DistConfig::default()).unwrap();
        let b = run_distributed(&part, &DistConfig { rho: DistRho::Schedule, ..DistConfig::default() }).unwrap();
        assert!(a.d.sub(&b.d).frobenius() <= 1e-10 * a.d.frobenius());
    }
}
