use std::path::Path;
use std::process::{Command, Output};

fn basn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_basn")).args(args).output().unwrap()
}

fn init(dir: &Path) -> String {
    let cfg = dir.join("run.toml");
    let out = basn(&[
        "init-config",
        "--output",
        cfg.to_str().unwrap(),
        "--output-dir",
        dir.join("run").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    cfg.to_str().unwrap().to_string()
}

#[test]
fn init_config_writes_a_loadable_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = init(dir.path());
    let text = std::fs::read_to_string(&cfg).unwrap();
    assert!(text.contains("schema_version = 1"));
}

#[test]
fn unknown_stage_is_an_argument_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = init(dir.path());
    let out = basn(&["train", "--config", &cfg, "--stages", "warmup"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_precondition_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = init(dir.path());
    let out = basn(&["train", "--config", &cfg, "--stages", "mfd-phase2"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mfd-phase1"));
}

#[test]
fn malformed_strategy_is_an_argument_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = init(dir.path());
    let out = basn(&["evaluate", "--config", &cfg, "--eval-strategy", "Max-LSM-1"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_config_fails() {
    let out = basn(&["train", "--config", "/nonexistent/run.toml"]);
    assert!(!out.status.success());
}
