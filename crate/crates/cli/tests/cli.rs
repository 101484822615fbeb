use std::path::PathBuf;
use std::process::{Command, Output};

fn framkit(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_framkit"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn tmp(name: &str) -> PathBuf {
    let mut p = std::env::temp_dir();
    p.push(format!("framkit-test-{}-{name}", std::process::id()));
    p
}

#[test]
fn sort_run_exits_zero_and_is_deterministic() {
    let args = [
        "sort", "--n", "512", "--s", "4", "--delta", "16", "--adversary",
        "inversion:p=0.5", "--seed", "7", "--trials", "3", "--format", "json",
    ];
    let a = framkit(&args, &[]);
    let b = framkit(&args, &[]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout, "reports must be byte-identical");
}

#[test]
fn csv_format_has_header_and_rows() {
    let out = framkit(
        &["sort", "--n", "64", "--trials", "2", "--format", "csv"],
        &[],
    );
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.trim_end().lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("command,n,s,delta"));
}

#[test]
fn pq_run_passes_under_attack() {
    let out = framkit(
        &[
            "pq", "--n", "2000", "--s", "16", "--delta", "64", "--adversary",
            "pq:p=0.01", "--workload", "2:1", "--seed", "9", "--format", "json",
        ],
        &[],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["aggregate"]["passes"], report["aggregate"]["trials"]);
}

#[test]
fn trace_export_and_replay_match() {
    let trace = tmp("trace.jsonl");
    let trace_str = trace.to_str().unwrap();
    let base = framkit(
        &[
            "sort", "--n", "300", "--s", "4", "--delta", "12", "--adversary",
            "random:p=0.02", "--seed", "21", "--trials", "1", "--format", "json",
            "--trace", trace_str,
        ],
        &[],
    );
    assert!(base.status.success(), "{}", String::from_utf8_lossy(&base.stderr));
    assert!(trace.exists());

    let replay_arg = format!("replay:file={trace_str}");
    let replayed = framkit(
        &[
            "sort", "--n", "300", "--s", "4", "--delta", "12", "--adversary",
            &replay_arg, "--seed", "21", "--trials", "1", "--format", "json",
        ],
        &[],
    );
    assert!(replayed.status.success());
    let a: serde_json::Value = serde_json::from_slice(&base.stdout).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&replayed.stdout).unwrap();
    assert_eq!(
        a["trials"][0]["metrics"], b["trials"][0]["metrics"],
        "replayed metrics must be identical"
    );
    std::fs::remove_file(&trace).ok();
}

#[test]
fn trace_with_many_trials_is_a_config_error() {
    let out = framkit(
        &["sort", "--n", "8", "--trials", "2", "--trace", "/tmp/nope.jsonl"],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_adversary_is_a_config_error() {
    let out = framkit(&["sort", "--adversary", "gremlins"], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn csafe_env_reduces_budget_until_allocation_fails() {
    // A tiny budget cannot host the merge buffers; the run must fail
    // loudly rather than silently exceed the safe capacity.
    let out = framkit(
        &["sort", "--n", "64", "--s", "4", "--delta", "8"],
        &[("FRAMKIT_CSAFE", "1")],
    );
    assert!(!out.status.success());
}

#[test]
fn bench_sweep_reports_zero_overhead_at_delta_zero() {
    let out = framkit(
        &[
            "bench", "--command", "sort", "--n", "256", "--s", "4,8", "--delta",
            "0", "--adversary", "inversion", "--trials", "2", "--format", "csv",
        ],
        &[],
    );
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.trim_end().lines().collect();
    assert_eq!(lines.len(), 3); // header + two S values
    for row in &lines[1..] {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[6], "0", "overhead must be identically zero: {row}");
        assert_eq!(cols[9], "true");
    }
}

#[test]
fn out_flag_writes_file() {
    let path = tmp("report.json");
    let out = framkit(
        &["sort", "--n", "32", "--out", path.to_str().unwrap()],
        &[],
    );
    assert!(out.status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"aggregate\""));
    std::fs::remove_file(&path).ok();
}
