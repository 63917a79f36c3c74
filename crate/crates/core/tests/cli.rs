use std::path::PathBuf;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_failsafe")).current_dir(env!("CARGO_MANIFEST_DIR")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn verify_passes() {
    let o = cli(&["verify", "--seeds", "20"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with(" pass")).count(), 4);
}

#[test]
fn bad_input_exits_with_validation_code() {
    assert_eq!(cli(&["placement", "--model", "no/such.toml", "--world", "3"]).status.code(), Some(1));
    assert_eq!(cli(&["placement", "--model", "data/models/toy.toml", "--world", "9"]).status.code(), Some(1));
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(1));
    let o = cli(&[
        "plan-recovery",
        "--model",
        "data/models/toy.toml",
        "--cluster",
        "data/clusters/h100x8.toml",
        "--world",
        "4",
        "--fail",
        "6",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn schedule_matches_golden() {
    let o = cli(&["schedule", "--scenario", "data/scenarios/three_ranks.json"]);
    let golden =
        std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/scenarios/three_ranks.golden"))
            .unwrap();
    assert_eq!(stdout(&o), golden);
}

#[test]
fn plan_recovery_text_reports_totals() {
    let o = cli(&[
        "plan-recovery",
        "--model",
        "data/models/toy.toml",
        "--cluster",
        "data/clusters/h100x8.toml",
        "--world",
        "4",
        "--fail",
        "3",
        "--mode",
        "full",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(s.contains("4 -> 3 GPUs") && s.contains("latency"), "{s}");
}

#[test]
fn report_on_empty_log_warns() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.jsonl");
    std::fs::write(&p, "").unwrap();
    let o = cli(&["report", p.to_str().unwrap(), "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["warning"], "empty metrics log");
    assert_eq!(v["ttft"]["p99"], 0.0);
}
