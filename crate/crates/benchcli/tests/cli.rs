use std::fs;
use std::process::Command;

use benchcli::runner::build_problem;
use benchcli::spec::{parse_spec, Preset};
use benchcli::verify::check_names;
use eagle_core::problemgen::BlockProblem;

const SPEC: &str = "\
[experiment]
name = cli
regime = central
solvers = eagle, oracle
seeds = 0..2
wall_clock = false

[problem]
d = 12
n = 16

[sweep]
axis = kappa
values = 10, 100
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eagle-bench"))
}

#[test]
fn run_writes_traces_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("cli.ini");
    fs::write(&spec, SPEC).unwrap();
    let out = dir.path().join("out");
    let st = bin().args(["--threads", "2", "run"]).arg(&spec).arg("--out").arg(&out).output().unwrap();
    assert_eq!(st.status.code(), Some(0), "{}", String::from_utf8_lossy(&st.stderr));
    let mut names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    assert_eq!(
        names,
        ["cli__kappa_100__eagle.csv", "cli__kappa_100__oracle.csv", "cli__kappa_10__eagle.csv", "cli__kappa_10__oracle.csv", "cli__summary.csv"]
    );
}

#[test]
fn bad_spec_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.ini");
    fs::write(&spec, SPEC.replace("axis = kappa", "axis = r")).unwrap();
    let st = bin().arg("run").arg(&spec).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    let err = String::from_utf8_lossy(&st.stderr);
    assert!(err.contains("line 13") && err.contains("axis"), "{err}");
}

#[test]
fn missing_spec_exits_3() {
    let st = bin().args(["run", "/nonexistent/spec.ini", "--out", "/tmp"]).output().unwrap();
    assert_eq!(st.status.code(), Some(3));
}

#[test]
fn usage_error_exits_2() {
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(2));
}

#[test]
fn gen_writes_a_readable_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("cli.ini");
    fs::write(&spec, SPEC).unwrap();
    let fixture = dir.path().join("p.bin");
    let st = bin().arg("gen").arg("--spec").arg(&spec).arg("--out").arg(&fixture).args(["--seed", "7", "--value", "100"]).output().unwrap();
    assert_eq!(st.status.code(), Some(0), "{}", String::from_utf8_lossy(&st.stderr));
    let back = BlockProblem::read_from(&mut fs::File::open(&fixture).unwrap()).unwrap();
    let s = parse_spec(SPEC, Preset::Ci).unwrap();
    let mut expected = build_problem(&s.point(100.0), 7).unwrap();
    expected.seed = 0;
    assert_eq!(back, expected);
}

#[test]
fn verify_prints_one_line_per_invariant() {
    let st = bin().args(["verify", "--seeds", "3"]).output().unwrap();
    let text = String::from_utf8(st.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), check_names().len() + 1);
    assert!(lines[0].starts_with("module,invariant,passed,measured,threshold,margin"));
    let any_failed = lines[1..].iter().any(|l| l.split(',').nth(2) == Some("false"));
    assert_eq!(st.status.code(), Some(if any_failed { 1 } else { 0 }));
}
