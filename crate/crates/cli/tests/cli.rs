use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_besov-transfer"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn default_density_is_uniform_for_doubling() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["density"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("density.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{line}");
    }
    let listed = String::from_utf8_lossy(&o.stdout);
    assert!(listed.lines().any(|l| l.ends_with("density.csv")));
}

#[test]
fn ledger_subcommand_writes_the_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["ledger"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("ledger.csv")).unwrap();
    assert!(csv.starts_with("r,a_r,c_DC1"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn golden_spectrum_leads_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("golden.json");
    let o = run(&["--config", cfg.to_str().unwrap(), "spectrum"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
    let first = csv.lines().nth(1).unwrap();
    let fields: Vec<f64> = first.split(',').filter_map(|f| f.parse().ok()).collect();
    assert!(fields.iter().any(|v| (v - 1.0).abs() < 1e-9), "{first}");
}

#[test]
fn bad_parameters_exit_with_assumption_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("bad_params.json");
    let o = run(&["--config", cfg.to_str().unwrap(), "validate"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("0 < s+ε ≤ 1/p"), "{}", stderr(&o));
}

#[test]
fn malformed_config_exits_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{ "schema": "besov-transfer/1", "map": { "map": "doubling" }, "seed": "seven" }"#).unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "validate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`seed`"), "{}", stderr(&o));

    let o = run(&["explain", "nonsense"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn explain_prints_formula_and_values() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["explain", "C_D"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.starts_with("C_D"));
    assert!(text.contains("formula:") && text.contains("values:"));
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = config("golden.json");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let o = run(&["--config", cfg.to_str().unwrap(), "--seed", "3", "run"], d.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let mut names: Vec<_> = fs::read_dir(dirs[0].path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        let a = fs::read(dirs[0].path().join(&n)).unwrap();
        let b = fs::read(dirs[1].path().join(&n)).unwrap();
        assert!(a == b, "{n:?} differs");
    }
}
