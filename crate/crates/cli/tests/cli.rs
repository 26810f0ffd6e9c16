use std::path::PathBuf;
use std::process::{Command, Output};

fn data(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
        .to_str()
        .unwrap()
        .to_owned()
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("grf-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn grf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grf"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&grf(&[])), 1);
    assert_eq!(code(&grf(&["frobnicate"])), 1);
    assert_eq!(code(&grf(&["sample", "--count", "many"])), 1);
    assert_eq!(code(&grf(&["--help"])), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = scratch("data");
    let out = dir.to_str().unwrap();
    let missing = dir.join("nope.smi");
    let o = grf(&[
        "train",
        "--dataset",
        missing.to_str().unwrap(),
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let bad = dir.join("bad.json");
    std::fs::write(&bad, r#"{"model":{"no_such_field":1}}"#).unwrap();
    let o = grf(&["selfcheck", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(code(&o), 2);

    let junk = dir.join("junk.smi");
    std::fs::write(&junk, "C1CC\n").unwrap();
    let o = grf(&["train", "--dataset", junk.to_str().unwrap(), "--out", out]);
    assert_eq!(code(&o), 2);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn selfcheck_passes_and_fails_on_injection() {
    let dir = scratch("check");
    let out = dir.to_str().unwrap();
    let o = grf(&[
        "selfcheck",
        "--instances",
        "50",
        "--seed",
        "3",
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(dir.join("selfcheck.txt")).unwrap();
    assert!(table.contains("PASS") && !table.contains("FAIL"));

    let o = grf(&[
        "selfcheck",
        "--instances",
        "50",
        "--inject-over-budget",
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_then_sample_writes_outputs() {
    let dir = scratch("flow");
    let out = dir.to_str().unwrap();
    let cfg = data("toy.json");
    let toy = data("toy.smi");
    let o = grf(&[
        "train",
        "--config",
        &cfg,
        "--dataset",
        &toy,
        "--epochs",
        "1",
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let history = std::fs::read_to_string(dir.join("loss_history.csv")).unwrap();
    assert!(history.starts_with("epoch,step,nll") && history.lines().count() > 1);

    let ckpt = dir.join("model.json");
    let o = grf(&[
        "sample",
        "--config",
        &cfg,
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--count",
        "8",
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let smi = std::fs::read_to_string(dir.join("samples.smi")).unwrap();
    assert_eq!(smi.lines().count(), 8);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics.get("validity").is_some());
    std::fs::remove_dir_all(&dir).ok();
}
