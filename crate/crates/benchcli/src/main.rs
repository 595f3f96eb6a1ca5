use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use benchcli::runner::build_problem;
use benchcli::spec::{parse_spec, ExperimentSpec, Preset};
use benchcli::verify::{verify_suite, VerifyOptions};
use benchcli::run_experiment;
use clap::{Parser, Subcommand, ValueEnum};

/// Exit status: 0 success, 1 incomplete runs or failed invariants, 2 bad
/// arguments or experiment file, 3 I/O error.
#[derive(Parser)]
#[command(name = "eagle-bench", version, about = "Seeded EAGLE experiments and invariant checks")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Size defaults for `d` and `n` left out of an experiment file.
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Ci)]
    preset: PresetArg,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Ci,
    Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Ci => Preset::Ci,
            PresetArg::Paper => Preset::Paper,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment file; writes trace CSVs and a summary CSV.
    Run {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Zero all wall times so output is byte-identical across runs.
        #[arg(long)]
        no_wall_clock: bool,
    },
    /// Run the invariant suite; prints one CSV line per invariant.
    Verify {
        /// Seeds for checks without a fixed seed count.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the problem of an experiment file as a binary fixture.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the first seed of the file.
        #[arg(long)]
        seed: Option<u64>,
        /// Sweep value; defaults to the first.
        #[arg(long)]
        value: Option<f64>,
    },
}

enum Failure {
    Incomplete(String),
    Input(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Incomplete(_) => 1,
            Failure::Input(_) => 2,
            Failure::Io(_) => 3,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn load(path: &Path, preset: Preset) -> Result<ExperimentSpec, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_spec(&text, preset).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let preset = Preset::from(cli.preset);
    match cli.cmd {
        Cmd::Run { spec, out, no_wall_clock } => {
            let mut s = load(&spec, preset)?;
            if no_wall_clock {
                s.wall_clock = false;
            }
            let summary = run_experiment(&s, &out, cli.threads).map_err(|e| io_err(&out, e))?;
            println!(
                "{} trace files, summary {}",
                summary.trace_files.len(),
                summary.summary_file.display()
            );
            if summary.all_completed() {
                Ok(())
            } else {
                Err(Failure::Incomplete(format!("{} runs failed:\n{}", summary.failures.len(), summary.failures.join("\n"))))
            }
        }
        Cmd::Verify { seeds, out } => {
            let threads = if cli.threads == 0 { VerifyOptions::default().threads } else { cli.threads };
            let report = verify_suite(&VerifyOptions { seeds, threads, ..VerifyOptions::default() });
            report.write_csv(io::stdout().lock()).map_err(|e| Failure::Io(e.to_string()))?;
            if let Some(path) = out {
                let f = File::create(&path).map_err(|e| io_err(&path, e))?;
                report.write_csv(BufWriter::new(f)).map_err(|e| io_err(&path, e))?;
            }
            let failed: Vec<&str> = report.failed().iter().map(|c| c.name).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Incomplete(format!("failed invariants: {}", failed.join(", "))))
            }
        }
        Cmd::Gen { spec, out, seed, value } => {
            let s = load(&spec, preset)?;
            let seed = seed.or(s.seeds.first().copied()).unwrap_or(0);
            let value = value.unwrap_or(s.sweep.values[0]);
            let p = build_problem(&s.point(value), seed).map_err(|e| Failure::Input(e.to_string()))?;
            let mut w = BufWriter::new(File::create(&out).map_err(|e| io_err(&out, e))?);
            p.write_to(&mut w).map_err(|e| io_err(&out, e))?;
            w.flush().map_err(|e| io_err(&out, e))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Incomplete(m) | Failure::Input(m) | Failure::Io(m)) = &f;
            eprintln!("eagle-bench: {m}");
            ExitCode::from(f.code())
        }
    }
}
