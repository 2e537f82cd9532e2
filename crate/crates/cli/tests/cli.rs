use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::{json, Value};

fn delt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn delt")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "teacher_width": 8,
        "student_width": 8,
        "squeeze": { "epochs": 1 },
        "recovery": {
            "ipc": 2,
            "num_subbatches": 2,
            "max_iterations": 4,
            "round_iterations": 2,
            "synthesis_batch_size": 20
        },
        "eval": { "epochs": 1, "batch_size": 10 }
    });
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

/// One squeezed teacher shared by every test in this file.
fn fixture() -> &'static (tempfile::TempDir, PathBuf, PathBuf) {
    static FIX: OnceLock<(tempfile::TempDir, PathBuf, PathBuf)> = OnceLock::new();
    FIX.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let teacher = dir.path().join("teacher.safetensors");
        let out = delt(&[
            "squeeze",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            teacher.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "squeeze failed: {}", String::from_utf8_lossy(&out.stderr));
        (dir, cfg, teacher)
    })
}

#[test]
fn unknown_subcommand_exits_one() {
    assert_eq!(delt(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    assert_eq!(delt(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"recovery": {"ipcs": 3}}"#).unwrap();
    let out = delt(&["cost", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("recovery.ipcs"));
}

#[test]
fn cost_projection_reports_savings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"recovery": {"ipc": 50, "num_subbatches": 5, "max_iterations": 4000, "round_iterations": 500}}"#,
    )
    .unwrap();
    let out = delt(&["cost", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    // 50*4000 - 10*500*10 = 150000 per class, 25% below 200000
    assert!(text.contains("1500000"), "{text}");
    assert!(text.contains("25.0%"), "{text}");
}

#[test]
fn distill_writes_run_and_refuses_overwrite() {
    let (dir, cfg, teacher) = fixture();
    let run = dir.path().join("run-a");
    let args = [
        "distill",
        "--config",
        cfg.to_str().unwrap(),
        "--teacher",
        teacher.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ];
    let out = delt(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let meta: Value = serde_json::from_slice(&std::fs::read(run.join("meta.json")).unwrap()).unwrap();
    assert!(meta.is_object());
    assert!(run.join("iterations.jsonl").exists());

    let again = delt(&args);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));

    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(delt(&forced).status.success());

    let cost = delt(&["cost", "--run", run.to_str().unwrap()]);
    assert!(cost.status.success(), "{}", String::from_utf8_lossy(&cost.stderr));

    let eval = delt(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--teacher",
        teacher.to_str().unwrap(),
        "--run",
        run.to_str().unwrap(),
    ]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let line = std::fs::read_to_string(run.join("results.jsonl")).unwrap();
    let result: Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    let top1 = result["top1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));
}

#[test]
fn missing_teacher_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = delt(&["distill", "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
