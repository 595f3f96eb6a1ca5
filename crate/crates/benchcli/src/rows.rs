//! Trace rows and their CSV form.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::spec::{Regime, SolverKind};

#[derive(Debug, Error)]
pub enum CsvError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("header mismatch: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("record {record}: field `{field}`: cannot parse `{value}`")]
    Value { record: usize, field: &'static str, value: String },
}

pub const RESULT_FIELDS: [&str; 14] = [
    "run_id",
    "regime",
    "solver",
    "seed",
    "sweep_value",
    "iter",
    "rel_err",
    "lambda_bar",
    "kappa_l",
    "theta_l",
    "wall_ns",
    "flops",
    "comm_floats_cum",
    "alpha_measured",
];

/// One iteration of one run. Optional columns are written empty when absent.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub run_id: String,
    pub regime: Regime,
    pub solver: SolverKind,
    pub seed: u64,
    pub sweep_value: f64,
    pub iter: u64,
    /// Relative Frobenius error against the direct solution.
    pub rel_err: f64,
    pub lambda_bar: Option<f64>,
    pub kappa_l: Option<f64>,
    pub theta_l: Option<f64>,
    /// Cumulative solver time.
    pub wall_ns: u64,
    /// Cumulative analytic flop count, where the solver keeps one.
    pub flops: Option<u64>,
    pub comm_floats_cum: u64,
    /// Present iff the regime is distributed.
    pub alpha_measured: Option<f64>,
}

/// 17 significant digits; parses back to the same bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_f64(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

impl ResultRow {
    pub fn record(&self) -> [String; 14] {
        [
            self.run_id.clone(),
            self.regime.name().to_string(),
            self.solver.name().to_string(),
            self.seed.to_string(),
            fmt_f64(self.sweep_value),
            self.iter.to_string(),
            fmt_f64(self.rel_err),
            opt_f64(self.lambda_bar),
            opt_f64(self.kappa_l),
            opt_f64(self.theta_l),
            self.wall_ns.to_string(),
            self.flops.map(|f| f.to_string()).unwrap_or_default(),
            self.comm_floats_cum.to_string(),
            opt_f64(self.alpha_measured),
        ]
    }

    fn from_record(rec: &csv::StringRecord, index: usize) -> Result<Self, CsvError> {
        let field = |i: usize| rec.get(i).unwrap_or("");
        let err = |i: usize| CsvError::Value { record: index, field: RESULT_FIELDS[i], value: field(i).to_string() };
        let num = |i: usize| field(i).parse::<f64>().map_err(|_| err(i));
        let int = |i: usize| field(i).parse::<u64>().map_err(|_| err(i));
        let opt = |i: usize| if field(i).is_empty() { Ok(None) } else { num(i).map(Some) };
        Ok(Self {
            run_id: field(0).to_string(),
            regime: Regime::parse(field(1)).ok_or_else(|| err(1))?,
            solver: SolverKind::parse(field(2)).ok_or_else(|| err(2))?,
            seed: int(3)?,
            sweep_value: num(4)?,
            iter: int(5)?,
            rel_err: num(6)?,
            lambda_bar: opt(7)?,
            kappa_l: opt(8)?,
            theta_l: opt(9)?,
            wall_ns: int(10)?,
            flops: if field(11).is_empty() { None } else { Some(int(11)?) },
            comm_floats_cum: int(12)?,
            alpha_measured: opt(13)?,
        })
    }
}

pub fn write_rows(rows: &[ResultRow], w: impl Write) -> Result<(), CsvError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RESULT_FIELDS)?;
    for r in rows {
        out.write_record(r.record())?;
    }
    out.flush()?;
    Ok(())
}

/// Write `rows` to `path`; an empty slice gives a header-only file.
pub fn emit_csv(rows: &[ResultRow], path: &Path) -> Result<(), CsvError> {
    write_rows(rows, File::create(path)?)
}

pub fn read_rows(r: impl Read) -> Result<Vec<ResultRow>, CsvError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    if header.iter().ne(RESULT_FIELDS) {
        return Err(CsvError::Header { expected: RESULT_FIELDS.join(","), found: header.iter().collect::<Vec<_>>().join(",") });
    }
    rdr.records().enumerate().map(|(i, rec)| ResultRow::from_record(&rec?, i + 1)).collect()
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>, CsvError> {
    read_rows(File::open(path)?)
}
