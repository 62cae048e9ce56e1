use std::path::Path;
use std::process::{Command, Output};

fn semvo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semvo"))
        .args(args)
        .env("SEMVO_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

const QUICK: &str = "seed = 5\n[world]\nroute_length_m = 300.0\n[drive]\nduration_s = 4.0\n";

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUICK);
    let d = |s: &str| dir.path().join(s).display().to_string();
    let out = semvo(&["simulate", "--config", &cfg, "--out", &d("ds")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let hash = String::from_utf8(out.stdout).unwrap();
    assert_eq!(hash.trim().len(), 64);

    assert!(semvo(&["build-library", "--config", &cfg, "--dataset", &d("ds"), "--out", &d("lib.jsonl")]).status.success());
    assert!(semvo(&["localize", "--config", &cfg, "--dataset", &d("ds"), "--library", &d("lib.jsonl"), "--out", &d("run")])
        .status
        .success());
    let out = semvo(&["evaluate", "--config", &cfg, "--dataset", &d("ds"), "--run", &d("run"), "--out", &d("eval"), "--before-after"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("Before optimization"));
    let out = semvo(&["report", "--run", &d("eval")]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), table);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUICK);
    let a = semvo(&["simulate", "--config", &cfg, "--out", &dir.path().join("a").display().to_string()]);
    let b = semvo(&["simulate", "--config", &cfg, "--seed", "6", "--out", &dir.path().join("b").display().to_string()]);
    assert!(a.status.success() && b.status.success());
    assert_ne!(a.stdout, b.stdout);
    let manifest = std::fs::read_to_string(dir.path().join("b/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 6"), "{manifest}");
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let out = semvo(&["simulate", "--config", "/definitely/not/here.toml", "--out", "/tmp/unused-semvo"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/not/here.toml"));
}

#[test]
fn unknown_key_exits_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[localize]\nxi_pixels = 3.0\n");
    let out = semvo(&["simulate", "--config", &cfg, "--out", &dir.path().join("x").display().to_string()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("xi_pixels"));
}

#[test]
fn missing_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = semvo(&[
        "build-library",
        "--dataset",
        &dir.path().join("none").display().to_string(),
        "--out",
        &dir.path().join("lib.jsonl").display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
