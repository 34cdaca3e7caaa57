use std::path::Path;
use std::process::{Command, Output};

fn fedthe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedthe"))
        .args(args)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const TINY: &str = r#"
seeds = [1]
methods = ["global", "fedthe"]
streams = ["id", "ooc"]
threads = 1
[bench]
samples_per_class = 30
clients = 3
[train]
rounds = 2
"#;

#[test]
fn run_report_and_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("out");
    let run = fedthe(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let table = String::from_utf8(run.stdout).unwrap();
    assert!(table.contains("fedthe") && table.contains("Average"));
    assert!(out.join("report.csv").exists());

    let metrics = out.join("metrics.jsonl");
    let report = fedthe(&["report", metrics.to_str().unwrap()]);
    assert_eq!(report.status.code(), Some(0));
    assert_eq!(String::from_utf8(report.stdout).unwrap(), table);

    let trace = out.join("etrace.csv");
    let hist = fedthe(&[
        "ehist",
        trace.to_str().unwrap(),
        "--bins",
        "4",
        "--method",
        "fedthe",
    ]);
    assert_eq!(hist.status.code(), Some(0));
    let csv = String::from_utf8(hist.stdout).unwrap();
    assert!(csv.contains("ooc") && csv.contains("id"));
}

#[test]
fn seed_override_replaces_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("o");
    let run = fedthe(&[
        "run",
        &cfg,
        "--seed-override",
        "9",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(run.status.success());
    let text = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert!(text.lines().all(|l| l.contains("\"seed\":9")));
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "methods = []\n");
    let run = fedthe(&["run", &cfg]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("methods"));
}

#[test]
fn missing_file_exits_with_one() {
    let run = fedthe(&["report", "/nonexistent/metrics.jsonl"]);
    assert_eq!(run.status.code(), Some(1));
}

#[test]
fn selftest_passes() {
    let run = fedthe(&["selftest"]);
    assert_eq!(
        run.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&run.stdout)
    );
    let text = String::from_utf8(run.stdout).unwrap();
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 10);
    assert!(!text.contains("FAIL"));
}
