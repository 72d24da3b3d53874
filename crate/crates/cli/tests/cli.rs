use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hagmil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hagmil")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hagmil(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small dataset plus a briefly trained run inside `dir`.
fn trained(dir: &Path) {
    let cfg = dir.join("synth.json");
    fs::write(
        &cfg,
        r#"{"num_slides":24,"coarse_grid":[2,2],"lesion_count":[1,1],"lesion_size":[1,2],"feature_dim":8}"#,
    )
    .unwrap();
    ok(&["--seed", "5", "synth", "--config", p(&cfg), "--out", p(&dir.join("data"))]);
    ok(&[
        "--seed",
        "5",
        "train",
        "--data",
        p(&dir.join("data")),
        "--out-run",
        p(&dir.join("run")),
        "--max-epochs",
        "3",
    ]);
}

fn last_stderr_json(out: &Output) -> Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

#[test]
fn synth_train_eval_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let run = dir.path().join("run");
    for f in [
        "config.json",
        "train_config.json",
        "train_log.jsonl",
        "run.json",
        "level_0.ckpt",
        "level_2.ckpt",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let report_path = dir.path().join("report.json");
    ok(&["eval", "--run", p(&run), "--report", p(&report_path)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    let auc = report["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(report["config_digest"].as_str().unwrap().len(), 64);
    assert!(report["n"].as_u64().unwrap() > 0);
}

#[test]
fn budget_override_changes_digest_and_caps_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let run = dir.path().join("run");
    let small: Value = serde_json::from_str(&ok(&["eval", "--run", p(&run), "--k-override", "1"])).unwrap();
    let large: Value = serde_json::from_str(&ok(&["eval", "--run", p(&run), "--k-override", "64"])).unwrap();
    assert_ne!(small["config_digest"], large["config_digest"]);

    let lines = ok(&["sweep-k", "--run", p(&run), "--ks", "1,2,4"]);
    let ks: Vec<u64> = lines
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["k"].as_u64().unwrap())
        .collect();
    assert_eq!(ks, [1, 2, 4]);
}

#[test]
fn heatmap_and_inspect_describe_outputs() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let run = dir.path().join("run");
    let out = dir.path().join("map.pgm");
    ok(&[
        "heatmap",
        "--run",
        p(&run),
        "--slide",
        "slide_0000",
        "--format",
        "pgm",
        "--out",
        p(&out),
    ]);
    assert!(fs::read(&out).unwrap().starts_with(b"P5"));

    let feat = dir.path().join("data/slide_0000/level_0.hagf");
    let header: Value = serde_json::from_str(&ok(&["inspect", "--file", p(&feat)])).unwrap();
    assert_eq!(header["format"], "HAGF");
    assert_eq!(header["level"], 0);
    assert_eq!(header["n"], 64);
    assert_eq!(header["d"], 8);

    let ckpt: Value = serde_json::from_str(&ok(&["inspect", "--file", p(&run.join("level_1.ckpt"))])).unwrap();
    assert_eq!(ckpt["format"], "HAGC");
    assert!(!ckpt["tensors"].as_array().unwrap().is_empty());
}

#[test]
fn failures_end_with_a_json_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"NOPE and more bytes than a header needs, padded out").unwrap();
    let out = hagmil(&["inspect", "--file", p(&junk)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(last_stderr_json(&out)["error"], "bad_magic");

    let out = hagmil(&["eval", "--run", p(&dir.path().join("absent"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(last_stderr_json(&out)["error"], "io");

    let out = hagmil(&["eval", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(last_stderr_json(&out)["error"], "usage");

    assert!(hagmil(&["--help"]).status.success());
}
