use std::fs;

use besov_transfer::config::{Analysis, RunConfig, RunError};
use besov_transfer::dynamics::MapSpec;
use besov_transfer::pipeline::{lookup, run, Session};
use besov_transfer::spectral::DensityMethod;

fn config(map: MapSpec, dir: &tempfile::TempDir, analyses: &[Analysis]) -> RunConfig {
    let mut c = RunConfig::new(map).with_level(8).with_analyses(analyses);
    c.output = dir.path().to_path_buf();
    c
}

#[test]
fn every_emitted_bound_and_ledger_column_is_explained() {
    let dir = tempfile::tempdir().unwrap();
    run(config(MapSpec::golden(), &dir, &[Analysis::Ledger, Analysis::Bounds])).unwrap();
    let bounds = fs::read_to_string(dir.path().join("bounds.csv")).unwrap();
    for line in bounds.lines().skip(1) {
        let name = line.split(',').next().unwrap();
        assert!(lookup(name).is_some(), "bound {name} has no explain entry");
    }
    let ledger = fs::read_to_string(dir.path().join("ledger.csv")).unwrap();
    for column in ledger.lines().next().unwrap().split(',').skip(1) {
        assert!(lookup(column).is_some(), "ledger column {column} has no explain entry");
    }
}

#[test]
fn explain_reports_values() {
    let dir = tempfile::tempdir().unwrap();
    let mut session = Session::new(config(MapSpec::doubling(), &dir, &[]));
    let t0 = session.explain("t0").unwrap();
    assert!(t0.contains("6.6667"), "{t0}");
    assert!(session.explain("c_d").unwrap().starts_with("C_D"));
    let err = session.explain("no_such_bound").unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn config_round_trips_and_names_bad_fields() {
    let c = RunConfig::new(MapSpec::gauss(20)).with_level(9);
    let back = RunConfig::from_json(&c.to_json()).unwrap();
    assert_eq!(back.to_json(), c.to_json());

    let minimal = r#"{ "schema": "besov-transfer/1", "map": { "map": "doubling" } }"#;
    assert!(RunConfig::from_json(minimal).is_ok());

    let bad = r#"{ "schema": "besov-transfer/1", "map": { "map": "doubling" }, "analysis": { "ly_ensemble": "many" } }"#;
    match RunConfig::from_json(bad) {
        Err(RunError::Config(msg)) => assert!(msg.contains("analysis.ly_ensemble"), "{msg}"),
        other => panic!("expected a config error, got {other:?}"),
    }

    let wrong_schema = r#"{ "schema": "besov-transfer/0", "map": { "map": "doubling" } }"#;
    assert_eq!(RunConfig::from_json(wrong_schema).unwrap_err().exit_code(), 2);
}

#[test]
fn parameter_violation_is_an_assumption_failure() {
    let text = r#"{
        "schema": "besov-transfer/1",
        "map": { "map": "doubling" },
        "params": { "s": 0.45, "p": 2, "q": 2, "beta": 0.47, "eps": 0.1, "delta": 0.05, "gamma": 0.5 }
    }"#;
    let err = RunConfig::from_json(text).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("0 < s+ε ≤ 1/p"), "{err}");
}

#[test]
fn exact_density_method_runs_through_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(MapSpec::golden(), &dir, &[Analysis::Density]);
    c.analysis.density_method = DensityMethod::Exact;
    run(c).unwrap();
    let report = fs::read_to_string(dir.path().join("density.json")).unwrap();
    assert!(report.contains("\"exact\""), "{report}");

    let dir = tempfile::tempdir().unwrap();
    let mut c = config(MapSpec::lorenz_cusp(0.75), &dir, &[Analysis::Density]);
    c.analysis.density_method = DensityMethod::Exact;
    assert_eq!(run(c).unwrap_err().exit_code(), 2);
}

#[test]
fn analyses_run_in_dependency_order_and_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let written = run(config(MapSpec::doubling(), &dir, &Analysis::ALL)).unwrap();
    let names: Vec<String> = written.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    for expected in [
        "validate.json",
        "ledger.csv",
        "matrix.csv",
        "density.csv",
        "support.csv",
        "spectrum.csv",
        "correlations.csv",
        "clt.json",
        "ly.json",
        "bounds.txt",
        "bounds.csv",
    ] {
        assert!(names.iter().any(|n| n == expected), "missing {expected} in {names:?}");
    }
    assert_eq!(names[0], "validate.json");
    let density = fs::read_to_string(dir.path().join("density.csv")).unwrap();
    for line in density.lines().skip(1) {
        let value: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((value - 1.0).abs() < 1e-12, "{line}");
    }
}
