use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn schedkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_schedkit")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = schedkit(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn workload(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../workloads").join(name)
}

fn write_workload(dir: &Path, body: &str) -> String {
    let p = dir.join("w.toml");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &str = r#"
name = "small"
cores = 2

[[task]]
label = "spin"
body = [{ compute = 300_000 }, { sleep = 50_000 }]
repeat = 20

[[task]]
label = "spin"
body = [{ compute = 200_000 }, "yield"]
repeat = 30
"#;

#[test]
fn run_prints_csv_metrics() {
    let w = workload("pingpong.toml");
    let csv = ok(&["run", "--workload", w.to_str().unwrap(), "--policy", "shinjuku"]);
    let header = csv.lines().next().unwrap();
    assert!(header.contains("metric") && header.contains("value"), "{header}");
    let completed = csv.lines().find(|l| l.contains(",completed,")).expect("completed row");
    assert!(completed.contains(",2,") || completed.contains(",2.0,"), "{completed}");
    assert!(csv.contains("shinjuku"));
}

#[test]
fn run_in_concurrent_mode_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let w = write_workload(dir.path(), SMALL);
    let out = dir.path().join("m.csv");
    ok(&["run", "--workload", &w, "--mode", "concurrent", "--out", out.to_str().unwrap()]);
    let csv = std::fs::read_to_string(out).unwrap();
    assert!(csv.contains(",violations,0"), "{csv}");
}

#[test]
fn record_then_replay_reports_no_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let w = write_workload(dir.path(), SMALL);
    let log = dir.path().join("run.log");
    let log = log.to_str().unwrap();
    ok(&["record", "--workload", &w, "--log", log, "--seed", "3"]);
    let report = dir.path().join("report.json");
    ok(&["replay", "--log", log, "--report", report.to_str().unwrap()]);
    let json = std::fs::read_to_string(&report).unwrap();
    assert!(json.contains("\"mismatches\": []"), "{json}");
    let again = ok(&["replay", "--log", log]);
    assert_eq!(again.trim(), json.trim());
}

#[test]
fn replay_against_another_tie_break_finds_a_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let w = write_workload(dir.path(), SMALL);
    let log = dir.path().join("run.log");
    let log = log.to_str().unwrap();
    ok(&["record", "--workload", &w, "--log", log]);
    // The diverged replay may also stall on lock order; the report comes first either way.
    let out = schedkit(&["replay", "--log", log, "--policy", "wfq-high-tie", "--deadlock-timeout-ms", "2000"]);
    let json = String::from_utf8_lossy(&out.stdout);
    assert!(json.contains("select_task_rq"), "{json}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("first mismatch"));
}

#[test]
fn upgrade_demo_reports_conservation() {
    let out = ok(&["upgrade-demo", "--at", "50000000"]);
    assert!(out.contains("calls_during_hold"), "{out}");
    assert!(!out.to_lowercase().contains("lost"), "{out}");
}

#[test]
fn bench_suite_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    ok(&["bench", "--suite", "bimodal", "--out-dir", d, "--scale", "0.05"]);
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(csv.contains("response_p99_short"));
    let dat = std::fs::read_to_string(dir.path().join("bimodal_p99.dat")).unwrap();
    assert_eq!(dat.lines().filter(|l| !l.starts_with('#')).count(), 9, "{dat}");
}

#[test]
fn errors_exit_with_status_one() {
    let missing = schedkit(&["run", "--workload", "/nonexistent/w.toml"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));

    let dir = tempfile::tempdir().unwrap();
    let bad = write_workload(dir.path(), "name = 3\n");
    assert_eq!(schedkit(&["run", "--workload", &bad]).status.code(), Some(1));

    let suite = schedkit(&["bench", "--suite", "nope", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(suite.status.code(), Some(1));

    let garbage = dir.path().join("g.log");
    std::fs::write(&garbage, b"not a log").unwrap();
    assert_eq!(schedkit(&["replay", "--log", garbage.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn bad_arguments_are_usage_errors() {
    let out = schedkit(&["run", "--workload", "x.toml", "--policy", "cfs"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown policy"));
}
