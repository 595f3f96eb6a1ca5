//! Synthetic block-completion problems, noise, machine partitions and the
//! diversity index.

use std::io::{Read, Write};

use thiserror::Error;

use crate::matcore::{orthonormal_columns, rank_cutoff, sym_eig, Mat, MatError};
use crate::rng::Stream;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("bad generator spec: {0}")]
    BadSpec(String),
    #[error("{machines} machines for {columns} columns")]
    TooManyMachines { machines: usize, columns: usize },
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad problem file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenKind {
    TrainingLike,
    SvdSpectrum,
    Gaussian,
    StudentT,
    CorrelatedGaussian,
    SparseRademacher,
    BlockClustered,
}

impl GenKind {
    pub const ALL: [GenKind; 7] = [
        GenKind::TrainingLike,
        GenKind::SvdSpectrum,
        GenKind::Gaussian,
        GenKind::StudentT,
        GenKind::CorrelatedGaussian,
        GenKind::SparseRademacher,
        GenKind::BlockClustered,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GenKind::TrainingLike => "training_like",
            GenKind::SvdSpectrum => "svd_spectrum",
            GenKind::Gaussian => "gaussian",
            GenKind::StudentT => "student_t",
            GenKind::CorrelatedGaussian => "correlated_gaussian",
            GenKind::SparseRademacher => "sparse_rademacher",
            GenKind::BlockClustered => "block_clustered",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistParams {
    pub nu: u32,
    pub rho_corr: f64,
    pub sparsity: f64,
    pub clusters: usize,
}

impl Default for DistParams {
    fn default() -> Self {
        Self { nu: 4, rho_corr: 0.8, sparsity: 0.1, clusters: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub kind: GenKind,
    pub d: usize,
    pub n: usize,
    pub d_prime: usize,
    pub n_prime: usize,
    pub rank: usize,
    /// Per-coordinate variance decay `a^i` of the latent factors.
    pub anisotropy: f64,
    pub kappa_target: Option<f64>,
    pub params: DistParams,
    /// Replace `C` by column-normalized `A g` (and `D` by the matching `B g`).
    pub c_in_span: bool,
}

impl GenSpec {
    pub fn new(kind: GenKind, d: usize, n: usize, d_prime: usize, n_prime: usize, rank: usize) -> Self {
        Self {
            kind,
            d,
            n,
            d_prime,
            n_prime,
            rank,
            anisotropy: 0.7,
            kappa_target: None,
            params: DistParams::default(),
            c_in_span: false,
        }
    }

    /// `svd_spectrum` with exact condition number `kappa`.
    pub fn svd(d: usize, n: usize, d_prime: usize, n_prime: usize, rank: usize, kappa: f64) -> Self {
        Self { kappa_target: Some(kappa), ..Self::new(GenKind::SvdSpectrum, d, n, d_prime, n_prime, rank) }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::BadSpec(m.to_string()));
        if self.d == 0 || self.n == 0 || self.d_prime == 0 || self.n_prime == 0 {
            return bad("dimensions must be positive");
        }
        if self.rank == 0 || self.rank > self.d.min(self.n) {
            return bad("rank must lie in 1..=min(d, n)");
        }
        if !(self.anisotropy > 0.0 && self.anisotropy <= 1.0) {
            return bad("anisotropy must lie in (0, 1]");
        }
        if let Some(k) = self.kappa_target {
            if !(k >= 1.0 && k.is_finite()) {
                return bad("kappa_target must be >= 1");
            }
        }
        if self.kind == GenKind::StudentT && self.params.nu <= 2 {
            return bad("student_t needs nu > 2");
        }
        if self.kind == GenKind::SparseRademacher && !(self.params.sparsity > 0.0 && self.params.sparsity <= 1.0) {
            return bad("sparsity must lie in (0, 1]");
        }
        if self.kind == GenKind::BlockClustered {
            let k = self.params.clusters;
            if k == 0 || k > (self.d + self.d_prime).min(self.n + self.n_prime) {
                return bad("clusters must lie in 1..=min(d+d', n+n')");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockProblem {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    /// Ground truth, never read by the solvers.
    pub d_hidden: Mat,
    pub noise_var: f64,
    pub seed: u64,
}

impl BlockProblem {
    pub fn from_blocks(a: Mat, b: Mat, c: Mat, d_hidden: Mat) -> Self {
        assert_eq!(a.cols(), b.cols());
        assert_eq!(a.rows(), c.rows());
        assert_eq!(b.rows(), d_hidden.rows());
        assert_eq!(c.cols(), d_hidden.cols());
        Self { a, b, c, d_hidden, noise_var: 0.0, seed: 0 }
    }

    pub fn d(&self) -> usize {
        self.a.rows()
    }
    pub fn n(&self) -> usize {
        self.a.cols()
    }
    pub fn d_prime(&self) -> usize {
        self.b.rows()
    }
    pub fn n_prime(&self) -> usize {
        self.c.cols()
    }

    /// The full matrix `[A C; B D]`.
    pub fn x(&self) -> Mat {
        let top = Mat::hcat(&[&self.a, &self.c]);
        let bot = Mat::hcat(&[&self.b, &self.d_hidden]);
        Mat::vcat(&[&top, &bot])
    }

    /// Multiply every block by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            a: self.a.scale(s),
            b: self.b.scale(s),
            c: self.c.scale(s),
            d_hidden: self.d_hidden.scale(s),
            ..self.clone()
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), GenError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for v in [self.d(), self.n(), self.d_prime(), self.n_prime()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.noise_var.to_bits().to_le_bytes())?;
        for m in [&self.a, &self.b, &self.c, &self.d_hidden] {
            for x in m.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads the binary layout written by [`BlockProblem::write_to`]. The
    /// format carries no seed, so `seed` comes back as 0.
    pub fn read_from(r: &mut impl Read) -> Result<Self, GenError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(GenError::Format("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(GenError::Format(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        let mut dims = [0usize; 4];
        for v in &mut dims {
            r.read_exact(&mut b8)?;
            *v = u64::from_le_bytes(b8) as usize;
        }
        r.read_exact(&mut b8)?;
        let noise_var = f64::from_bits(u64::from_le_bytes(b8));
        let [d, n, dp, np] = dims;
        let mut read_mat = |rows: usize, cols: usize| -> Result<Mat, GenError> {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                r.read_exact(&mut b8)?;
                data.push(f64::from_le_bytes(b8));
            }
            Ok(Mat::new(rows, cols, data)?)
        };
        let a = read_mat(d, n)?;
        let b = read_mat(dp, n)?;
        let c = read_mat(d, np)?;
        let dh = read_mat(dp, np)?;
        Ok(Self { a, b, c, d_hidden: dh, noise_var, seed: 0 })
    }
}

const MAGIC: &[u8; 4] = b"EGLB";
const FORMAT_VERSION: u32 = 1;

fn gaussian_mat(rows: usize, cols: usize, s: &mut Stream) -> Mat {
    Mat::from_fn(rows, cols, |_, _| s.gaussian())
}

fn normalize_columns(m: &Mat, by: &Mat) -> Mat {
    let norms: Vec<f64> = (0..by.cols()).map(|j| by.col(j).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    Mat::from_fn(m.rows(), m.cols(), |i, j| if norms[j] > 0.0 { m.get(i, j) / norms[j] } else { m.get(i, j) })
}

/// Latent factor with rows drawn i.i.d. from the kind's distribution.
fn factor(spec: &GenSpec, rows: usize, s: &mut Stream) -> Mat {
    let k = spec.rank;
    let p = &spec.params;
    match spec.kind {
        GenKind::TrainingLike => {
            let sd: Vec<f64> = (1..=k).map(|i| spec.anisotropy.powi(i as i32).sqrt()).collect();
            Mat::from_fn(rows, k, |_, j| sd[j] * s.gaussian())
        }
        GenKind::Gaussian => gaussian_mat(rows, k, s),
        GenKind::StudentT => {
            let norm = (p.nu as f64 / (p.nu as f64 - 2.0)).sqrt();
            Mat::from_fn(rows, k, |_, _| s.student_t(p.nu) / norm)
        }
        GenKind::CorrelatedGaussian => {
            // Each column is a stationary AR(1) sequence: Cov_ij = rho^|i-j|.
            let rho = p.rho_corr;
            let innov = (1.0 - rho * rho).sqrt();
            let mut m = Mat::zeros(rows, k);
            for j in 0..k {
                let mut x = s.gaussian();
                m.set(0, j, x);
                for i in 1..rows {
                    x = rho * x + innov * s.gaussian();
                    m.set(i, j, x);
                }
            }
            m
        }
        GenKind::SparseRademacher => {
            let scale = 1.0 / p.sparsity.sqrt();
            Mat::from_fn(rows, k, |_, _| {
                let keep = s.uniform() < p.sparsity;
                let sign = if s.uniform() < 0.5 { -1.0 } else { 1.0 };
                if keep {
                    sign * scale
                } else {
                    0.0
                }
            })
        }
        GenKind::BlockClustered | GenKind::SvdSpectrum => unreachable!("not a factor kind"),
    }
}

/// Log-uniform values on `[lo, 1]`, descending, with both endpoints pinned.
fn log_uniform_spectrum(k: usize, lo: f64, s: &mut Stream) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let mut v: Vec<f64> = (0..k)
        .map(|i| match i {
            0 => 1.0,
            i if i == k - 1 => lo,
            _ => (lo.ln() * s.uniform()).exp(),
        })
        .collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

fn orthonormal_gaussian(rows: usize, cols: usize, s: &mut Stream) -> Result<Mat, GenError> {
    let q = orthonormal_columns(&gaussian_mat(rows, cols, s))?;
    if q.cols() != cols {
        return Err(GenError::BadSpec("degenerate gaussian draw".into()));
    }
    Ok(q)
}

pub fn generate(spec: &GenSpec, seed: u64) -> Result<BlockProblem, GenError> {
    spec.validate()?;
    let (d, n, dp, np) = (spec.d, spec.n, spec.d_prime, spec.n_prime);
    let mut p = match spec.kind {
        GenKind::SvdSpectrum => {
            let mut s = Stream::new(seed, "svd");
            let k = spec.rank;
            let kappa = spec.kappa_target.unwrap_or(1e2);
            let sigma = log_uniform_spectrum(k, 1.0 / kappa, &mut s);
            let u = orthonormal_gaussian(d, k, &mut s)?;
            let v = orthonormal_gaussian(n, k, &mut s)?;
            let us = Mat::from_fn(d, k, |i, j| u.get(i, j) * sigma[j]);
            let a = us.matmul_t(&v);
            let w0 = gaussian_mat(dp, d, &mut s).scale(1.0 / (d as f64).sqrt());
            let h = gaussian_mat(k, np, &mut s);
            let c = normalize_columns(&u.matmul(&h), &u.matmul(&h));
            let b = w0.matmul(&a);
            let dh = w0.matmul(&c);
            BlockProblem { a, b, c, d_hidden: dh, noise_var: 0.0, seed }
        }
        GenKind::BlockClustered => {
            let mut s = Stream::new(seed, "clustered");
            let k = spec.params.clusters;
            let rows = d + dp;
            let mut labels: Vec<usize> = (0..rows).map(|i| i % k).collect();
            let perm = s.permutation(rows);
            labels = perm.iter().map(|&i| labels[i]).collect();
            let onehot = Mat::from_fn(rows, k, |i, j| if labels[i] == j { 1.0 } else { 0.0 });
            let centroids = gaussian_mat(n + np, k, &mut s);
            let x = onehot.matmul_t(&centroids).scale(1.0 / (k as f64).sqrt());
            split(&x, d, n, seed)
        }
        _ => {
            let s1 = Stream::new(seed, "factor-left");
            let s2 = Stream::new(seed, "factor-right");
            // Sparse factors can lose rank; redraw until rank(A) = rank(X) = s.
            let attempts = if spec.kind == GenKind::SparseRademacher { 64 } else { 1 };
            let mut found = None;
            for t in 0..attempts {
                let (mut l, mut r) = if t == 0 { (s1.child("draw", 0), s2.child("draw", 0)) } else { (s1.child("redraw", t), s2.child("redraw", t)) };
                let r1 = factor(spec, d + dp, &mut l);
                let r2 = factor(spec, n + np, &mut r);
                let x = r1.matmul_t(&r2).scale(1.0 / (spec.rank as f64).sqrt());
                let p = split(&x, d, n, seed);
                if attempts == 1 || (column_rank(&p.a) == spec.rank && column_rank(&x) == spec.rank) {
                    found = Some(p);
                    break;
                }
            }
            found.ok_or_else(|| GenError::BadSpec("could not draw factors of full rank".into()))?
        }
    };
    if spec.c_in_span {
        let mut s = Stream::new(seed, "c-span");
        let g = gaussian_mat(n, np, &mut s);
        let ag = p.a.matmul(&g);
        p.c = normalize_columns(&ag, &ag);
        let bg = p.b.matmul(&g);
        p.d_hidden = normalize_columns(&bg, &ag);
    }
    Ok(p)
}

fn column_rank(m: &Mat) -> usize {
    orthonormal_columns(m).map_or(0, |q| q.cols())
}

fn split(x: &Mat, d: usize, n: usize, seed: u64) -> BlockProblem {
    let (rows, cols) = x.shape();
    BlockProblem {
        a: x.block(0, d, 0, n),
        b: x.block(d, rows, 0, n),
        c: x.block(0, d, n, cols),
        d_hidden: x.block(d, rows, n, cols),
        noise_var: 0.0,
        seed,
    }
}

/// Adds i.i.d. `N(0, sigma2)` to every block, drawn from the `(seed, "noise")` stream.
pub fn add_noise(p: &BlockProblem, sigma2: f64) -> BlockProblem {
    assert!(sigma2 >= 0.0, "noise variance must be nonnegative");
    if sigma2 == 0.0 {
        return p.clone();
    }
    let sd = sigma2.sqrt();
    let mut s = Stream::new(p.seed, "noise");
    let mut perturb = |m: &Mat| Mat::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) + sd * s.gaussian());
    BlockProblem {
        a: perturb(&p.a),
        b: perturb(&p.b),
        c: perturb(&p.c),
        d_hidden: perturb(&p.d_hidden),
        noise_var: p.noise_var + sigma2,
        seed: p.seed,
    }
}

#[derive(Debug, Clone)]
pub struct Shard {
    pub a: Mat,
    pub b: Mat,
    /// Source column of each shard column in the original `A`.
    pub columns: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub shards: Vec<Shard>,
    pub c: Mat,
    pub d_hidden: Mat,
    pub overlap: f64,
}

impl Partition {
    pub fn machines(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_blocks(&self) -> Vec<Mat> {
        self.shards.iter().map(|s| s.a.clone()).collect()
    }
}

/// Seeded column shuffle, contiguous blocks, then `ceil(overlap * n / M)`
/// extra columns per shard sampled from the other shards.
pub fn partition(p: &BlockProblem, machines: usize, overlap: f64, seed: u64) -> Result<Partition, GenError> {
    let n = p.n();
    if machines == 0 {
        return Err(GenError::BadSpec("need at least one machine".into()));
    }
    if machines > n {
        return Err(GenError::TooManyMachines { machines, columns: n });
    }
    if !(0.0..=1.0).contains(&overlap) {
        return Err(GenError::BadSpec("overlap must lie in [0, 1]".into()));
    }
    let mut s = Stream::new(seed, "partition");
    let perm = if machines == 1 { (0..n).collect() } else { s.permutation(n) };
    let base = n / machines;
    let extra = n % machines;
    let mut blocks: Vec<Vec<usize>> = Vec::with_capacity(machines);
    let mut at = 0;
    for m in 0..machines {
        let len = base + usize::from(m < extra);
        blocks.push(perm[at..at + len].to_vec());
        at += len;
    }
    let copies = (overlap * n as f64 / machines as f64).ceil() as usize;
    let mut shards = Vec::with_capacity(machines);
    for m in 0..machines {
        let mut cols = blocks[m].clone();
        if copies > 0 && machines > 1 {
            let mut pool: Vec<usize> = blocks.iter().enumerate().filter(|(k, _)| *k != m).flat_map(|(_, b)| b.iter().copied()).collect();
            pool.sort_unstable();
            let mut sub = s.child("overlap", m as u64);
            let order = sub.permutation(pool.len());
            cols.extend(order.iter().take(copies).map(|&i| pool[i]));
        }
        shards.push(Shard { a: p.a.select_cols(&cols), b: p.b.select_cols(&cols), columns: cols });
    }
    Ok(Partition { shards, c: p.c.clone(), d_hidden: p.d_hidden.clone(), overlap })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diversity {
    /// Smallest eigenvalue of `M^-1 sum P^mu` over all of `R^d`.
    pub alpha: f64,
    /// Smallest eigenvalue restricted to the union of the shard spans.
    pub alpha_span: f64,
    /// The union of shard spans is a proper subspace (`alpha` is zero).
    pub degenerate: bool,
}

pub fn diversity_index(shards: &[Mat]) -> Result<Diversity, GenError> {
    if shards.is_empty() {
        return Err(GenError::BadSpec("no shards".into()));
    }
    let d = shards[0].rows();
    let mut avg = Mat::zeros(d, d);
    for a in shards {
        let q = orthonormal_columns(a)?;
        avg.axpy(1.0, &q.matmul_t(&q));
    }
    let avg = avg.scale(1.0 / shards.len() as f64);
    let eig = sym_eig(&avg)?;
    let cut = rank_cutoff(d, d, eig.top());
    let smallest = *eig.values.last().unwrap();
    let degenerate = smallest <= cut;
    let alpha_span = eig.values.iter().copied().filter(|v| *v > cut).last().unwrap_or(0.0);
    Ok(Diversity { alpha: if degenerate { 0.0 } else { smallest }, alpha_span, degenerate })
}
