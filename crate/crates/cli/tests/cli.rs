use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_systolic-sca"));
    c.env_remove("SYSTOLIC_SCA_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_traces_guards_and_digests() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    let first = run(&["gen-traces", "--out", out, "--traces", "500", "--snr", "4", "--csv"]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert!(dir.path().join("traces.csv").exists());
    let again = run(&["gen-traces", "--out", out, "--traces", "500", "--snr", "4"]);
    assert_eq!(code(&again), 3);
    assert!(String::from_utf8_lossy(&again.stderr).contains("overwrite"));
    let forced = run(&["gen-traces", "--out", out, "--traces", "500", "--snr", "4", "--overwrite"]);
    assert_eq!(code(&forced), 0);
    let digest = |o: &Output| String::from_utf8_lossy(&o.stdout).split_whitespace().next().unwrap().to_string();
    assert_eq!(digest(&first), digest(&forced));
    assert_eq!(digest(&first).len(), 64);
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().env("SYSTOLIC_SCA_OUT", dir.path()).args(["gen-traces", "--traces", "50"]).output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("traces.bin").exists());
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"n": 3, "weights": [1, 2, 3]}"#).unwrap();
    assert_eq!(code(&run(&["cpa", "--config", p(&cfg)])), 2);
    fs::write(&cfg, r#"{"traces": 100, "unknown_key": true}"#).unwrap();
    assert_eq!(code(&run(&["cpa", "--config", p(&cfg)])), 2);
    assert_eq!(code(&run(&["cpa", "--tuned", "7"])), 2);
    let o = run(&["template", "attack", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--allow-weight-setting"));
}

#[test]
fn missing_input_exits_three() {
    assert_eq!(code(&run(&["cpa", "--input", "/nonexistent/traces.bin"])), 3);
}

#[test]
fn cpa_with_known_weights_succeeds_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"weights": [23, 180, 7, 91, 64, 255, 3, 140, 77], "traces": 3000, "samples": {"kind": "tuned", "column": 1}}"#).unwrap();
    let o = run(&["cpa", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["correct"], 9);
    assert!(dir.path().join("cpa/scores_pe33.csv").exists());
    // Far too noisy: the attack fails and says so through the exit code.
    let o = run(&["cpa", "--config", p(&cfg), "--out", p(dir.path()), "--snr", "0.01", "--traces", "20", "--overwrite"]);
    assert_eq!(code(&o), 1);
    let r = run(&["report", "--out", p(dir.path())]);
    assert_eq!(code(&r), 0);
    assert!(fs::read_to_string(dir.path().join("report.md")).unwrap().contains("## CPA"));
}

#[test]
fn verify_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run(&["gen-traces", "--out", p(&a), "--traces", "2000", "--seed", "1"])), 0);
    assert_eq!(code(&run(&["gen-traces", "--out", p(&b), "--traces", "2000", "--seed", "2"])), 0);
    let (ta, tb) = (a.join("traces.bin"), b.join("traces.bin"));
    assert_eq!(code(&run(&["verify", p(&ta), p(&ta), "--min-pcc", "1"])), 0);
    assert_eq!(code(&run(&["verify", p(&ta), p(&tb), "--min-pcc", "0.5"])), 1);
    let o = run(&["verify", p(&ta), p(&tb), "--max-abs", "0.2"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["report"]["pcc"].as_f64().unwrap().abs() < 0.2);
}

#[test]
fn template_profile_writes_templates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"template": {"traces_per_class": 5, "probes": 2}}"#).unwrap();
    let o = run(&["template", "profile", "--allow-weight-setting", "--config", p(&cfg), "--target", "2,1", "--snr", "2", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("templates/pe21.json").exists());
}

#[test]
fn noise_sweep_prints_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"snr_grid": [10.0, 1.0], "samples": {"kind": "tuned", "column": 1}, "cpa": {"sweep_repetitions": 3}}"#).unwrap();
    let o = run(&["noise-sweep", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().count(), 3);
    assert!(dir.path().join("sweep/cpa_noise_sweep.svg").exists());
}
