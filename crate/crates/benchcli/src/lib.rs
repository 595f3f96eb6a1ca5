//! Seeded experiment runner for the EAGLE solvers: experiment files, sweep
//! execution with CSV traces and summaries, and the executable invariant suite.

pub mod rows;
pub mod runner;
pub mod spec;
pub mod verify;

pub use rows::{emit_csv, read_csv, ResultRow, RESULT_FIELDS};
pub use runner::{run_experiment, ExperimentSummary, SummaryRow};
pub use spec::{parse_spec, ExperimentSpec, Preset, SpecError};
pub use verify::{run_check, verify_suite, Report, VerifyOptions};
