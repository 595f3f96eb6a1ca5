use benchcli::spec::{parse_spec, Axis, Preset, Regime, SolverKind, SpecError};
use eagle_core::problemgen::GenKind;

const GOOD: &str = "\
# comment
[experiment]
name = demo
regime = sketched
solvers = eagle, gd   ; trailing comment
seeds = 3, 5, 7
eps = 1e-6

[problem]
kind = svd_spectrum
kappa = 100

[sweep]
axis = r
values = 8, 16
";

#[test]
fn parses_a_full_file() {
    let s = parse_spec(GOOD, Preset::Ci).unwrap();
    assert_eq!(s.name, "demo");
    assert_eq!(s.regime, Regime::Sketched);
    assert_eq!(s.solvers, vec![SolverKind::Eagle, SolverKind::Gd]);
    assert_eq!(s.seeds, vec![3, 5, 7]);
    assert_eq!(s.eps, 1e-6);
    assert_eq!(s.max_iter, 200);
    assert_eq!(s.gen.kind, GenKind::SvdSpectrum);
    assert_eq!((s.gen.d, s.gen.n, s.gen.rank), (64, 64, 64));
    assert_eq!(s.gen.kappa_target, Some(100.0));
    assert_eq!(s.sweep.axis, Axis::R);
    assert_eq!(s.sweep.values, vec![8.0, 16.0]);
    assert_eq!(s.point(16.0).r, 16);
    assert!(s.wall_clock);
}

#[test]
fn preset_sets_missing_sizes_only() {
    let s = parse_spec(GOOD, Preset::Paper).unwrap();
    assert_eq!((s.gen.d, s.gen.n), (240, 240));
    let fixed = GOOD.replace("kappa = 100", "kappa = 100\nd = 20\nn = 30");
    let s = parse_spec(&fixed, Preset::Paper).unwrap();
    assert_eq!((s.gen.d, s.gen.n, s.gen.rank), (20, 30, 20));
}

#[test]
fn seed_ranges_expand() {
    let s = parse_spec(&GOOD.replace("seeds = 3, 5, 7", "seeds = 2..6"), Preset::Ci).unwrap();
    assert_eq!(s.seeds, vec![2, 3, 4, 5]);
}

fn err(text: &str) -> SpecError {
    parse_spec(text, Preset::Ci).unwrap_err()
}

fn field_at(e: &SpecError) -> (usize, &str) {
    match e {
        SpecError::Field { line, field, .. } => (*line, field.as_str()),
        other => panic!("expected a field error, got {other:?}"),
    }
}

#[test]
fn axis_must_match_regime() {
    let e = err(&GOOD.replace("regime = sketched", "regime = central"));
    assert_eq!(field_at(&e), (14, "axis"));
    assert!(e.to_string().contains("not compatible"), "{e}");
}

#[test]
fn solver_must_exist_in_regime() {
    let e = err(&GOOD.replace("solvers = eagle, gd", "solvers = eagle, cg"));
    assert_eq!(field_at(&e), (5, "solvers"));
}

#[test]
fn unknown_key_reports_line_and_field() {
    let e = err(&GOOD.replace("eps = 1e-6", "epsilon = 1e-6"));
    assert_eq!(field_at(&e), (7, "epsilon"));
}

#[test]
fn unparsable_value_reports_line_and_field() {
    let e = err(&GOOD.replace("eps = 1e-6", "eps = tiny"));
    assert_eq!(field_at(&e), (7, "eps"));
    let e = err(&GOOD.replace("values = 8, 16", "values = 8, sixteen"));
    assert_eq!(field_at(&e), (15, "values"));
}

#[test]
fn out_of_range_sweep_values_are_rejected() {
    let e = err(&GOOD.replace("values = 8, 16", "values = 8, 65"));
    assert_eq!(field_at(&e), (15, "values"));
}

#[test]
fn kappa_needs_the_svd_generator() {
    let e = err(&GOOD.replace("kind = svd_spectrum", "kind = gaussian"));
    assert_eq!(field_at(&e), (11, "kappa"));
}

#[test]
fn missing_required_fields() {
    let e = err(&GOOD.replace("name = demo\n", ""));
    assert_eq!(e, SpecError::Missing { section: "experiment".into(), field: "name".into() });
    let e = err(&GOOD.replace("[sweep]\naxis = r\nvalues = 8, 16\n", ""));
    assert_eq!(e, SpecError::Missing { section: "sweep".into(), field: "axis".into() });
}

#[test]
fn syntax_errors_carry_the_line() {
    assert_eq!(err("[experiment\nname = x\n"), SpecError::Syntax { line: 1, message: "unterminated section header `[experiment`".into() });
    assert!(matches!(err("name = x\n"), SpecError::Syntax { line: 1, .. }));
    assert!(matches!(err("[experiment]\njust words\n"), SpecError::Syntax { line: 2, .. }));
    assert!(matches!(err("[nonsense]\n"), SpecError::Syntax { line: 1, .. }));
}

#[test]
fn shipped_specs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("specs");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        parse_spec(&text, Preset::Ci).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        count += 1;
    }
    assert!(count >= 6);
}
