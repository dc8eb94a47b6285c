use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn relground(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relground"))
        .current_dir(dir)
        .args(["--log-level", "error"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = relground(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// A 100-scene benchmark (seed 7) with a GEOM3D model, shared by the tests.
fn workspace() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        ok(dir.path(), &["--seed", "7", "gen-synthetic", "--scenes", "100", "--out", "d"]);
        ok(dir.path(), &["train-srm", "--data", "d/train", "--features", "geom3d", "--out", "m.bin"]);
        dir
    })
    .path()
}

#[test]
fn geom3d_reaches_95_top1_on_test_split() {
    let dir = workspace();
    let report: Value =
        serde_json::from_str(&ok(dir, &["eval-srm", "--model", "m.bin", "--data", "d/test", "--format", "json"])).unwrap();
    assert!(report["topk"]["1"].as_f64().unwrap() >= 95.0, "{report}");
    let text = ok(dir, &["eval-srm", "--model", "m.bin", "--data", "d/test"]);
    assert!(text.contains("micro F1") && text.contains("top-1:"));
}

#[test]
fn single_expression_gives_one_record() {
    let dir = workspace();
    let scene = "d/test/scene_00009.json";
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.join(scene)).unwrap()).unwrap();
    let e = &manifest["expressions"][0];
    let expr = format!("{},{},{}", e["target"].as_str().unwrap(), e["relation"].as_str().unwrap(), e["reference"].as_str().unwrap());
    let out = ok(dir, &["ground", "--model", "m.bin", "--scene", scene, "--expr", &expr]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 1);
    let rec: Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(rec["status"], "ok");
    assert_eq!(rec["target_bbox"].as_array().unwrap().len(), 4);
}

#[test]
fn unknown_labels_are_reported_not_fatal() {
    let dir = workspace();
    let out = ok(dir, &["ground", "--model", "m.bin", "--scene", "d/test/scene_00009.json", "--expr", "piano,left,book"]);
    let rec: Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(rec["status"], "no_candidates:target");
}

#[test]
fn resume_with_other_schema_is_a_validation_error() {
    let dir = workspace();
    let out = relground(dir, &["train-srm", "--data", "d/val", "--features", "geom2d", "--resume", "m.bin", "--out", "x.bin"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema mismatch"));
}

#[test]
fn exit_codes() {
    let dir = workspace();
    assert_eq!(code(&relground(dir, &["--help"])), 0);
    assert_eq!(code(&relground(dir, &["eval-srm", "--model", "m.bin", "--data", "d/test", "--bogus"])), 1);
    assert_eq!(code(&relground(dir, &["train-srm", "--data", "d/train"])), 1);
    assert_eq!(code(&relground(dir, &["train-srm", "--data", "d/val", "--out", "h.bin", "--hidden", "8"])), 1);
    assert_eq!(code(&relground(dir, &["train-srm", "--data", "d/val", "--out", "h.bin", "--lr", "-1"])), 1);
    assert_eq!(code(&relground(dir, &["ground", "--model", "m.bin", "--scene", "d/test/scene_00009.json", "--expr", "a,b"])), 1);
    // Existing outputs are kept unless --force.
    assert_eq!(code(&relground(dir, &["train-srm", "--data", "d/val", "--out", "m.bin"])), 1);
    // A corrupt model is bad input; an unreadable one is a runtime failure.
    std::fs::write(dir.join("corrupt.bin"), b"RGSM\x01\x00\x00\x00garbage").unwrap();
    assert_eq!(code(&relground(dir, &["eval-srm", "--model", "corrupt.bin", "--data", "d/test"])), 1);
    assert_eq!(code(&relground(dir, &["eval-srm", "--model", "missing.bin", "--data", "d/test"])), 2);
}

#[test]
fn force_allows_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["gen-synthetic", "--scenes", "10", "--out", "d"]);
    assert_eq!(code(&relground(p, &["gen-synthetic", "--scenes", "10", "--out", "d"])), 1);
    ok(p, &["--force", "gen-synthetic", "--scenes", "10", "--out", "d"]);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = workspace();
    std::fs::write(
        dir.join("cfg.toml"),
        "seed = 3\n[train-srm]\nepochs = 2\nhidden = [16, 8]\nbatch_size = 32\n",
    )
    .unwrap();
    ok(dir, &["--config", "cfg.toml", "train-srm", "--data", "d/val", "--out", "c1.bin"]);
    ok(dir, &["--config", "cfg.toml", "train-srm", "--data", "d/val", "--out", "c2.bin", "--epochs", "3"]);
    ok(dir, &["--seed", "3", "train-srm", "--data", "d/val", "--out", "c3.bin", "--epochs", "2", "--hidden", "16,8", "--batch-size", "32"]);
    let epochs = |log: &str| {
        let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.join(log)).unwrap()).unwrap();
        v["epochs"].as_array().unwrap().len()
    };
    assert_eq!(epochs("c1.bin.log.json"), 2);
    assert_eq!(epochs("c2.bin.log.json"), 3);
    assert_eq!(std::fs::read(dir.join("c1.bin")).unwrap(), std::fs::read(dir.join("c3.bin")).unwrap());

    std::fs::write(dir.join("bad.toml"), "[train-srm]\nno_such_flag = 1\n").unwrap();
    let out = relground(dir, &["--config", "bad.toml", "train-srm", "--data", "d/val", "--out", "c4.bin"]);
    assert_eq!(code(&out), 1);
    std::fs::write(dir.join("broken.toml"), "seed = [\n").unwrap();
    let out = relground(dir, &["--config", "broken.toml", "eval-srm", "--model", "m.bin", "--data", "d/test"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn repeated_flags_take_the_last_value() {
    let dir = workspace();
    let report: Value = serde_json::from_str(&ok(
        dir,
        &["eval-srm", "--model", "m.bin", "--data", "d/test", "--topk", "1", "--topk", "3", "--format", "json"],
    ))
    .unwrap();
    let keys: Vec<&String> = report["topk"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["3"]);
}

#[test]
fn grounding_evaluation_formats() {
    let dir = workspace();
    if !dir.join("g.jsonl").exists() {
        ok(dir, &["ground", "--model", "m.bin", "--data", "d/test", "--out", "g.jsonl"]);
    }
    let text = ok(dir, &["eval-grounding", "--results", "g.jsonl"]);
    assert!(text.contains("acc@0.50"));
    let json: Value = serde_json::from_str(&ok(dir, &["eval-grounding", "--results", "g.jsonl", "--format", "json"])).unwrap();
    assert!(json["n"].as_u64().unwrap() > 0);
    let strict: Value =
        serde_json::from_str(&ok(dir, &["eval-grounding", "--results", "g.jsonl", "--format", "json", "--threshold", "0.7"]))
            .unwrap();
    assert!(strict["accuracy"].as_f64() <= json["accuracy"].as_f64());
}

#[test]
fn lift_reports_every_detection() {
    let dir = workspace();
    let scene = "d/test/scene_00009.json";
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.join(scene)).unwrap()).unwrap();
    let n: usize = manifest["detections"].as_object().unwrap().values().map(|v| v.as_array().unwrap().len()).sum();
    let out: Value = serde_json::from_str(&ok(dir, &["lift", "--scene", scene])).unwrap();
    assert_eq!(out.as_array().unwrap().len(), n);
    let missing = relground(dir, &["lift", "--scene", scene, "--label", "piano"]);
    assert_eq!(code(&missing), 1);
}
