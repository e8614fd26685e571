use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn aquakv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aquakv"))
        .args(args)
        .output()
        .unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = aquakv(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn exit_code(args: &[&str]) -> (i32, Value) {
    let out = aquakv(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or("{}");
    (
        out.status.code().unwrap(),
        serde_json::from_str(line).unwrap_or(Value::Null),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, layers: &str) -> PathBuf {
    let path = dir.join(name);
    ok_json(&[
        "synth",
        "--layers",
        layers,
        "--kv-heads",
        "2",
        "--head-dim",
        "8",
        "--hidden-dim",
        "64",
        "--tokens",
        "800",
        "--seqs",
        "4",
        "--out",
        p(&path),
    ]);
    path
}

#[test]
fn bits_reports_full_precision_footprints() {
    let small = ok_json(&[
        "bits",
        "--geometry",
        "llama3.2-3b",
        "--tokens",
        "131072",
        "--bits",
        "16",
    ]);
    let gb = small["report"]["breakdown"]["gigabytes"].as_f64().unwrap();
    assert!((gb / 15.0 - 1.0).abs() < 0.01, "{gb}");
    let large = ok_json(&[
        "bits",
        "--geometry",
        "llama3.1-70b",
        "--tokens",
        "131072",
        "--bits",
        "16",
    ]);
    let gb = large["report"]["breakdown"]["gigabytes"].as_f64().unwrap();
    assert!((gb / 42.9 - 1.0).abs() < 0.01, "{gb}");

    let uni = ok_json(&[
        "bits",
        "--layers",
        "4",
        "--kv-heads",
        "2",
        "--head-dim",
        "64",
        "--tokens",
        "100",
        "--backbone",
        "uniform",
        "--bits",
        "2",
    ]);
    assert_eq!(uni["report"]["breakdown"]["bits_per_value"], 2.5);
    let vq = ok_json(&[
        "bits",
        "--geometry",
        "qwen2.5-7b",
        "--tokens",
        "1000",
        "--backbone",
        "vq",
        "--bits",
        "2",
    ]);
    assert_eq!(vq["report"]["breakdown"]["bits_per_value"], 2.015625);

    let list = ok_json(&["bits", "--list-geometries"]);
    assert_eq!(list["geometries"].as_array().unwrap().len(), 6);
}

#[test]
fn calibrate_replay_and_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let trace = synth(dir.path(), "t.kvt", "3");
    let preds = dir.path().join("p.aqkv");
    let report = dir.path().join("calib.json");

    let info = ok_json(&["inspect", p(&trace)]);
    assert_eq!(info["format"], "KVT1");
    assert_eq!(info["meta"]["n_layers"], 3);

    let out = aquakv(&[
        "calibrate",
        "--trace",
        p(&trace),
        "--out",
        p(&preds),
        "--report",
        p(&report),
        "--buffer",
        "32",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let calib: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(calib["command"], "calibrate");
    assert!(
        calib["report"]["calibration"]["summary"]["error_ratio"]
            .as_f64()
            .unwrap()
            < 1.0
    );
    assert!(Path::new(&format!("{}.json", p(&preds))).exists());

    let info = ok_json(&["inspect", p(&preds)]);
    assert_eq!(info["format"], "AQKV");
    assert_eq!(info["calibration"]["buffer_tokens"], 32);

    let cache = dir.path().join("c.aqkc");
    let with = ok_json(&[
        "replay",
        "--trace",
        p(&trace),
        "--predictors",
        p(&preds),
        "--save-cache",
        p(&cache),
    ]);
    assert_eq!(with["report"]["with_predictors"], true);
    assert_eq!(with["config"]["replay"]["cache"]["buffer_tokens"], 32);
    let info = ok_json(&["inspect", p(&cache)]);
    assert_eq!(info["format"], "AQKC");
    assert_eq!(info["header"]["n_tokens"], 200);
    assert_eq!(info["header"]["predictors"], true);

    let without = ok_json(&["replay", "--trace", p(&trace), "--buffer", "32"]);
    let notes = without["report"]["notes"].as_array().unwrap();
    assert!(notes
        .iter()
        .any(|n| n.as_str().unwrap().contains("baseline")));
    let (mw, mo) = (
        with["report"]["pooled"]["mse"].as_f64().unwrap(),
        without["report"]["pooled"]["mse"].as_f64().unwrap(),
    );
    assert!(mw < mo, "{mw} vs {mo}");

    let pruned = ok_json(&[
        "replay",
        "--trace",
        p(&trace),
        "--predictors",
        p(&preds),
        "--prune-budget",
        "0.5",
    ]);
    assert_eq!(pruned["report"]["kind"], "prune_replay");
    assert_eq!(pruned["report"]["kept_tokens"], 400);
}

#[test]
fn reports_are_deterministic_and_configs_replay() {
    let dir = tempfile::tempdir().unwrap();
    let trace = synth(dir.path(), "t.kvt", "3");
    let args = [
        "replay",
        "--trace",
        p(&trace),
        "--backbone",
        "uniform",
        "--bits",
        "3",
        "--chunk",
        "17",
    ];
    let first = aquakv(&args);
    assert!(first.status.success());
    let text = String::from_utf8(first.stdout).unwrap();
    assert_eq!(text, String::from_utf8(aquakv(&args).stdout).unwrap());
    let a = dir.path().join("a.json");
    std::fs::write(&a, &text).unwrap();

    let c = dir.path().join("c.json");
    let out = aquakv(&["replay", "--config", p(&a), "--report", p(&c)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let first: Value = serde_json::from_str(&text).unwrap();
    let again: Value = serde_json::from_slice(&std::fs::read(&c).unwrap()).unwrap();
    assert_eq!(first["report"], again["report"]);
    assert_eq!(first["config"]["replay"], again["config"]["replay"]);

    let synth_a = ok_json(&[
        "synth",
        "--tokens",
        "64",
        "--seqs",
        "2",
        "--layers",
        "2",
        "--kv-heads",
        "1",
        "--head-dim",
        "8",
        "--hidden-dim",
        "32",
        "--out",
        p(&dir.path().join("s1.kvt")),
    ]);
    let synth_b = ok_json(&[
        "synth",
        "--tokens",
        "64",
        "--seqs",
        "2",
        "--layers",
        "2",
        "--kv-heads",
        "1",
        "--head-dim",
        "8",
        "--hidden-dim",
        "32",
        "--out",
        p(&dir.path().join("s2.kvt")),
    ]);
    assert_eq!(synth_a["report"]["checksum"], synth_b["report"]["checksum"]);
}

#[test]
fn probe_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let trace = synth(dir.path(), "t.kvt", "4");
    let csv = dir.path().join("p.csv");
    let r = ok_json(&[
        "probe",
        "--trace",
        p(&trace),
        "--sources",
        "prevL1,prevT1",
        "--targets",
        "keys",
        "--csv",
        p(&csv),
    ]);
    assert_eq!(r["report"]["means"].as_array().unwrap().len(), 2);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("target,source,layer,train_evr,holdout_evr"));
    assert_eq!(text.lines().count(), 1 + 3 + 4);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.kvt");

    assert_eq!(exit_code(&["bits", "--no-such-flag"]).0, 2);
    let (code, err) = exit_code(&["bits", "--geometry", "nonexistent"]);
    assert_eq!((code, err["error"].as_str()), (3, Some("config")));
    let (code, err) = exit_code(&[
        "synth",
        "--hidden-dim",
        "32",
        "--out",
        p(&dir.path().join("x.kvt")),
    ]);
    assert_eq!((code, err["error"].as_str()), (3, Some("config")));
    assert_eq!(exit_code(&["replay", "--trace", p(&missing)]).0, 4);

    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a known file").unwrap();
    let (code, err) = exit_code(&["inspect", p(&junk)]);
    assert_eq!((code, err["error"].as_str()), (5, Some("format")));

    let trace = synth(dir.path(), "t.kvt", "3");
    let mut bytes = std::fs::read(&trace).unwrap();
    let n = bytes.len();
    bytes[n - 100] ^= 1;
    let bad = dir.path().join("bad.kvt");
    std::fs::write(&bad, &bytes).unwrap();
    let (code, err) = exit_code(&["inspect", p(&bad)]);
    assert_eq!((code, err["error"].as_str()), (5, Some("checksum")));

    let preds = dir.path().join("p.aqkv");
    assert!(aquakv(&[
        "calibrate",
        "--trace",
        p(&trace),
        "--out",
        p(&preds),
        "--backbone",
        "uniform",
        "--bits",
        "2",
        "--report",
        p(&dir.path().join("r.json"))
    ])
    .status
    .success());
    let other = synth(dir.path(), "o.kvt", "4");
    let (code, err) = exit_code(&["replay", "--trace", p(&other), "--predictors", p(&preds)]);
    assert_eq!((code, err["error"].as_str()), (6, Some("incompatible")));

    let out = Command::new(env!("CARGO_BIN_EXE_aquakv"))
        .args(["bits", "--list-geometries"])
        .env("AQUAKV_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let out = Command::new(env!("CARGO_BIN_EXE_aquakv"))
        .args(["bits", "--list-geometries"])
        .env("AQUAKV_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
}
