//! Experiment files: INI-style sections of `key = value` lines.
//!
//! ```text
//! [experiment]
//! name = kappa_sweep
//! regime = central            # central | distributed | sketched | estimation
//! solvers = eagle, gd, cg     # eagle | gd | cg | oracle
//! seeds = 0..10               # range or comma list
//! eps = 1e-10
//! max_iter = 200
//!
//! [problem]
//! kind = svd_spectrum
//! d = 64
//! n = 64
//!
//! [sweep]
//! axis = kappa                # kappa | M | alpha_overlap | r | step_scale | noise
//! values = 1e2, 1e3, 1e4
//! ```
//!
//! Full key list in the crate README. Sizes left out of `[problem]` come from
//! the preset.

use std::collections::BTreeMap;
use std::fmt;

use eagle_core::problemgen::{GenKind, GenSpec};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: field `{field}`: {message}")]
    Field { line: usize, field: String, message: String },
    #[error("missing field `{field}` in [{section}]")]
    Missing { section: String, field: String },
}

fn field_err(line: usize, field: &str, message: impl Into<String>) -> SpecError {
    SpecError::Field { line, field: field.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    Central,
    Distributed,
    Sketched,
    Estimation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SolverKind {
    Eagle,
    Gd,
    Cg,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Kappa,
    Machines,
    AlphaOverlap,
    R,
    StepScale,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    Ci,
    Paper,
}

impl Preset {
    /// Default `d = n`.
    pub fn size(self) -> usize {
        match self {
            Preset::Ci => 64,
            Preset::Paper => 240,
        }
    }
}

macro_rules! named {
    ($t:ty { $($v:ident => $s:literal),+ $(,)? }) => {
        impl $t {
            pub const ALL: &'static [$t] = &[$(<$t>::$v),+];

            pub fn name(self) -> &'static str {
                match self { $(<$t>::$v => $s),+ }
            }

            pub fn parse(s: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|v| v.name() == s)
            }
        }

        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named!(Regime { Central => "central", Distributed => "distributed", Sketched => "sketched", Estimation => "estimation" });
named!(SolverKind { Eagle => "eagle", Gd => "gd", Cg => "cg", Oracle => "oracle" });
named!(Axis { Kappa => "kappa", Machines => "M", AlphaOverlap => "alpha_overlap", R => "r", StepScale => "step_scale", Noise => "noise" });
named!(Preset { Ci => "ci", Paper => "paper" });

impl Regime {
    pub fn supports(self, s: SolverKind) -> bool {
        match self {
            Regime::Central => true,
            Regime::Distributed | Regime::Sketched => s != SolverKind::Cg,
            Regime::Estimation => matches!(s, SolverKind::Eagle | SolverKind::Oracle),
        }
    }
}

impl Axis {
    pub fn supports(self, r: Regime) -> bool {
        match self {
            Axis::Machines | Axis::AlphaOverlap => r == Regime::Distributed,
            Axis::R => r == Regime::Sketched,
            Axis::Kappa | Axis::StepScale | Axis::Noise => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub axis: Axis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub regime: Regime,
    pub solvers: Vec<SolverKind>,
    pub gen: GenSpec,
    pub sweep: Sweep,
    pub seeds: Vec<u64>,
    pub eps: f64,
    pub max_iter: usize,
    /// Multiplies `(eta, gamma)` of every solver.
    pub step_scale: f64,
    /// Observation noise variance added after generation.
    pub noise: f64,
    pub machines: usize,
    pub overlap: f64,
    pub accelerated: bool,
    pub r: usize,
    /// Record `lambda_bar`, `kappa_l`, `theta_l` (one eigensolve per iteration).
    pub diagnostics: bool,
    /// Record wall time; off gives byte-identical output across runs.
    pub wall_clock: bool,
}

struct Entry {
    line: usize,
    value: String,
}

struct Section {
    line: usize,
    entries: BTreeMap<String, Entry>,
}

const SECTIONS: &[(&str, &[&str])] = &[
    ("experiment", &["name", "regime", "solvers", "seeds", "eps", "max_iter", "step_scale", "noise", "diagnostics", "wall_clock"]),
    ("problem", &["kind", "d", "n", "d_prime", "n_prime", "rank", "kappa", "anisotropy", "c_in_span"]),
    ("sweep", &["axis", "values"]),
    ("distributed", &["machines", "overlap", "accelerated"]),
    ("sketch", &["r"]),
];

fn strip_comment(line: &str) -> &str {
    let cut = line.find(['#', ';']).unwrap_or(line.len());
    line[..cut].trim()
}

fn lex(text: &str) -> Result<BTreeMap<String, Section>, SpecError> {
    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = strip_comment(raw);
        if s.is_empty() {
            continue;
        }
        if let Some(rest) = s.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| SpecError::Syntax { line, message: format!("unterminated section header `{s}`") })?
                .trim()
                .to_string();
            if !SECTIONS.iter().any(|(n, _)| *n == name) {
                return Err(SpecError::Syntax { line, message: format!("unknown section [{name}]") });
            }
            if sections.contains_key(&name) {
                return Err(SpecError::Syntax { line, message: format!("duplicate section [{name}]") });
            }
            sections.insert(name.clone(), Section { line, entries: BTreeMap::new() });
            current = Some(name);
            continue;
        }
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| SpecError::Syntax { line, message: format!("expected `key = value`, got `{s}`") })?;
        let (key, value) = (key.trim(), value.trim());
        let sec_name = current.as_ref().ok_or_else(|| SpecError::Syntax { line, message: "key outside any section".into() })?;
        let allowed = SECTIONS.iter().find(|(n, _)| n == sec_name).map(|(_, k)| *k).unwrap_or(&[]);
        if !allowed.contains(&key) {
            return Err(field_err(line, key, format!("unknown key in [{sec_name}]")));
        }
        let sec = sections.get_mut(sec_name).expect("section registered");
        if sec.entries.contains_key(key) {
            return Err(field_err(line, key, "duplicate key"));
        }
        if value.is_empty() {
            return Err(field_err(line, key, "empty value"));
        }
        sec.entries.insert(key.to_string(), Entry { line, value: value.to_string() });
    }
    Ok(sections)
}

struct Fields<'a> {
    sections: &'a BTreeMap<String, Section>,
}

impl<'a> Fields<'a> {
    fn get(&self, section: &str, key: &str) -> Option<&'a Entry> {
        self.sections.get(section).and_then(|s| s.entries.get(key))
    }

    fn required(&self, section: &str, key: &str) -> Result<&'a Entry, SpecError> {
        self.get(section, key).ok_or_else(|| SpecError::Missing { section: section.into(), field: key.into() })
    }

    fn parse<T: std::str::FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, SpecError> {
        match self.get(section, key) {
            None => Ok(default),
            Some(e) => e.value.parse().map_err(|_| field_err(e.line, key, format!("cannot parse `{}`", e.value))),
        }
    }

    fn line(&self, section: &str, key: &str) -> usize {
        self.get(section, key).map(|e| e.line).or_else(|| self.sections.get(section).map(|s| s.line)).unwrap_or(0)
    }
}

fn list<T>(e: &Entry, key: &str, mut item: impl FnMut(&str) -> Option<T>) -> Result<Vec<T>, SpecError> {
    let mut out = Vec::new();
    for tok in e.value.split(',') {
        let tok = tok.trim();
        out.push(item(tok).ok_or_else(|| field_err(e.line, key, format!("bad list item `{tok}`")))?);
    }
    Ok(out)
}

fn parse_seeds(e: &Entry) -> Result<Vec<u64>, SpecError> {
    if let Some((lo, hi)) = e.value.split_once("..") {
        let bad = || field_err(e.line, "seeds", format!("bad range `{}`", e.value));
        let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
        if hi <= lo {
            return Err(field_err(e.line, "seeds", "empty range"));
        }
        return Ok((lo..hi).collect());
    }
    list(e, "seeds", |t| t.parse().ok())
}

/// Parse an experiment file. Sizes absent from `[problem]` come from `preset`.
pub fn parse_spec(text: &str, preset: Preset) -> Result<ExperimentSpec, SpecError> {
    let sections = lex(text)?;
    let f = Fields { sections: &sections };

    let name = f.required("experiment", "name")?.value.clone();
    if !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(field_err(f.line("experiment", "name"), "name", "use letters, digits, `_` or `-`"));
    }
    let e = f.required("experiment", "regime")?;
    let regime = Regime::parse(&e.value).ok_or_else(|| field_err(e.line, "regime", format!("unknown regime `{}`", e.value)))?;
    let e = f.required("experiment", "solvers")?;
    let solvers = list(e, "solvers", SolverKind::parse)?;
    for (i, s) in solvers.iter().enumerate() {
        if solvers[..i].contains(s) {
            return Err(field_err(e.line, "solvers", format!("`{s}` listed twice")));
        }
        if !regime.supports(*s) {
            return Err(field_err(e.line, "solvers", format!("`{s}` is not available in the {regime} regime")));
        }
    }
    let seeds = parse_seeds(f.required("experiment", "seeds")?)?;

    let kind_entry = f.get("problem", "kind");
    let kind = match kind_entry {
        None => GenKind::SvdSpectrum,
        Some(e) => GenKind::parse(&e.value).ok_or_else(|| field_err(e.line, "kind", format!("unknown generator `{}`", e.value)))?,
    };
    let size = preset.size();
    let d = f.parse("problem", "d", size)?;
    let n = f.parse("problem", "n", size)?;
    let d_prime = f.parse("problem", "d_prime", 2)?;
    let n_prime = f.parse("problem", "n_prime", 2)?;
    let rank = f.parse("problem", "rank", d.min(n))?;
    let mut gen = GenSpec::new(kind, d, n, d_prime, n_prime, rank);
    gen.anisotropy = f.parse("problem", "anisotropy", gen.anisotropy)?;
    gen.c_in_span = f.parse("problem", "c_in_span", false)?;
    if let Some(e) = f.get("problem", "kappa") {
        let k: f64 = e.value.parse().map_err(|_| field_err(e.line, "kappa", format!("cannot parse `{}`", e.value)))?;
        if kind != GenKind::SvdSpectrum {
            return Err(field_err(e.line, "kappa", "only the svd_spectrum generator takes a condition number"));
        }
        gen.kappa_target = Some(k);
    }
    gen.validate().map_err(|err| field_err(f.line("problem", "d"), "problem", err.to_string()))?;

    let e = f.required("sweep", "axis")?;
    let axis = Axis::parse(&e.value).ok_or_else(|| field_err(e.line, "axis", format!("unknown axis `{}`", e.value)))?;
    if !axis.supports(regime) {
        return Err(field_err(e.line, "axis", format!("axis `{axis}` is not compatible with the {regime} regime")));
    }
    if axis == Axis::Kappa && kind != GenKind::SvdSpectrum {
        return Err(field_err(e.line, "axis", "a kappa sweep needs the svd_spectrum generator"));
    }
    let ve = f.required("sweep", "values")?;
    let values = list(ve, "values", |t| t.parse::<f64>().ok().filter(|v| v.is_finite()))?;

    let spec = ExperimentSpec {
        name,
        regime,
        solvers,
        gen,
        sweep: Sweep { axis, values },
        seeds,
        eps: f.parse("experiment", "eps", 1e-10)?,
        max_iter: f.parse("experiment", "max_iter", 200)?,
        step_scale: f.parse("experiment", "step_scale", 1.0)?,
        noise: f.parse("experiment", "noise", 0.0)?,
        machines: f.parse("distributed", "machines", 4)?,
        overlap: f.parse("distributed", "overlap", 0.0)?,
        accelerated: f.parse("distributed", "accelerated", false)?,
        r: f.parse("sketch", "r", (n / 4).max(1))?,
        diagnostics: f.parse("experiment", "diagnostics", false)?,
        wall_clock: f.parse("experiment", "wall_clock", true)?,
    };
    check_values(&spec, &f)?;
    Ok(spec)
}

fn check_values(s: &ExperimentSpec, f: &Fields) -> Result<(), SpecError> {
    let vl = f.line("sweep", "values");
    let bad = |v: f64, why: &str| Err(field_err(vl, "values", format!("{v}: {why}")));
    for &v in &s.sweep.values {
        match s.sweep.axis {
            Axis::Kappa if v < 1.0 => return bad(v, "kappa must be at least 1"),
            Axis::Machines if v < 1.0 || v.fract() != 0.0 || v as usize > s.gen.n => {
                return bad(v, "M must be an integer in [1, n]")
            }
            Axis::AlphaOverlap if !(0.0..=1.0).contains(&v) => return bad(v, "overlap must lie in [0, 1]"),
            Axis::R if v < 1.0 || v.fract() != 0.0 || v as usize > s.gen.n => return bad(v, "r must be an integer in [1, n]"),
            Axis::StepScale if v <= 0.0 => return bad(v, "step scale must be positive"),
            Axis::Noise if v < 0.0 => return bad(v, "noise variance must be non-negative"),
            _ => {}
        }
    }
    let check = |ok: bool, section: &str, key: &str, why: &str| {
        if ok {
            Ok(())
        } else {
            Err(field_err(f.line(section, key), key, why))
        }
    };
    check(s.eps > 0.0, "experiment", "eps", "must be positive")?;
    check(s.max_iter > 0, "experiment", "max_iter", "must be positive")?;
    check(s.step_scale > 0.0, "experiment", "step_scale", "must be positive")?;
    check(s.noise >= 0.0, "experiment", "noise", "must be non-negative")?;
    check(s.machines >= 1 && s.machines <= s.gen.n, "distributed", "machines", "must lie in [1, n]")?;
    check((0.0..=1.0).contains(&s.overlap), "distributed", "overlap", "must lie in [0, 1]")?;
    check(s.r >= 1 && s.r <= s.gen.n, "sketch", "r", "must lie in [1, n]")?;
    Ok(())
}

/// One sweep point resolved into solver parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub value: f64,
    pub gen: GenSpec,
    pub noise: f64,
    pub step_scale: f64,
    pub machines: usize,
    pub overlap: f64,
    pub r: usize,
}

impl ExperimentSpec {
    pub fn point(&self, value: f64) -> Point {
        let mut p = Point {
            value,
            gen: self.gen.clone(),
            noise: self.noise,
            step_scale: self.step_scale,
            machines: self.machines,
            overlap: self.overlap,
            r: self.r,
        };
        match self.sweep.axis {
            Axis::Kappa => p.gen.kappa_target = Some(value),
            Axis::Machines => p.machines = value as usize,
            Axis::AlphaOverlap => p.overlap = value,
            Axis::R => p.r = value as usize,
            Axis::StepScale => p.step_scale = value,
            Axis::Noise => p.noise = value,
        }
        p
    }
}
