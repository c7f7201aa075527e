use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
    "image_size": 16,
    "data": {"n": 24},
    "gan": {"levels": 3, "epochs": 1},
    "regressor": {"epochs": 2},
    "baseline": {"epochs": 2},
    "adaptation": {"epochs": 2}
}"#;

fn voxcal(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxcal"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), TINY).unwrap();
    dir
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tiny_dir();
    let out = voxcal(dir.path(), &["--set", "gan.nonsense=3", "config"]);
    assert_eq!(out.status.code(), Some(2));
    let out = voxcal(dir.path(), &["--set", "data.n=0", "synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("data").exists());
}

#[test]
fn missing_checkpoints_exit_with_three() {
    let dir = tiny_dir();
    let out = voxcal(dir.path(), &["--config", "run.json", "eval"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let out = voxcal(dir.path(), &["--config", "run.json", "infer", "nothing.ppm"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn synth_refuses_to_overwrite_without_force() {
    let dir = tiny_dir();
    assert!(voxcal(dir.path(), &["--config", "run.json", "synth"]).status.success());
    assert_eq!(voxcal(dir.path(), &["--config", "run.json", "synth"]).status.code(), Some(2));
    assert!(voxcal(dir.path(), &["--config", "run.json", "--force", "synth"]).status.success());
}

#[test]
fn tiny_run_writes_every_artifact() {
    let dir = tiny_dir();
    let root = dir.path();
    for args in [&["synth"][..], &["train", "all"], &["eval"], &["--set", "ablation_seeds=[0]", "ablate"]] {
        let mut full = vec!["--config", "run.json"];
        full.extend_from_slice(args);
        let out = voxcal(root, &full);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for f in [
        "checkpoints/seed-0/generator.ckpt",
        "checkpoints/seed-0/adaptation.ckpt",
        "reports/train/seed-0/gan_loss.csv",
        "reports/train/seed-0/adaptation_loss.csv",
        "reports/eval/metrics.csv",
        "reports/eval/scatter.svg",
        "reports/ablate/table.txt",
        "reports/run_record.json",
    ] {
        assert!(root.join(f).exists(), "{f}");
    }
    let record: serde_json::Value = serde_json::from_slice(&std::fs::read(root.join("reports/run_record.json")).unwrap()).unwrap();
    assert!(record["version"].as_str().unwrap().starts_with('v'));
    assert!(!record["stages"].as_array().unwrap().is_empty());
}
