use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn seprep(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seprep"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = seprep(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = seprep(dir, args);
    assert_eq!(out.status.code(), Some(1), "{args:?} should exit with 1");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic is one line: {err:?}");
    err
}

const SOURCES: [&str; 3] = ["identity", "invert", "noise_0.2"];

/// gen-data, three sources, assemble, adapt and fuse, at a small size.
fn build_pipeline(dir: &Path) {
    ok(dir, &["gen-data", "--domains", "identity,rotate:25,invert,noise:0.2", "--classes", "4", "--per-class", "15", "--out", "data"]);
    for s in SOURCES {
        let domain = format!("data/{s}.train.sprn");
        let out = format!("{s}.ck");
        ok(dir, &["train-source", "--domain", &domain, "--arch", "widths=8-16,classes=4", "--epochs", "4", "--out", &out]);
    }
    ok(dir, &["assemble", "--sources", "identity.ck", "invert.ck", "noise_0.2.ck", "--out", "sep.ck"]);
    ok(dir, &["adapt", "--model", "sep.ck", "--target", "data/rotate_25.train.sprn", "--epochs", "2", "--out", "adapted.ck"]);
    let fuse = ok(dir, &["fuse", "--model", "adapted.ck", "--out", "fused.ck"]);
    let dev: f64 = fuse.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(dev < 1e-4, "fusion deviation {dev}");
}

fn eval(dir: &Path, model: &str, out: &str) -> Value {
    let mut args = vec!["eval", "--model", model, "--target", "data/rotate_25.test.sprn", "--out", out, "--sources"];
    let srcs: Vec<String> = SOURCES.iter().map(|s| format!("data/{s}.test.sprn")).collect();
    args.extend(srcs.iter().map(String::as_str));
    ok(dir, &args);
    serde_json::from_str(&fs::read_to_string(dir.join(out).join("report.json")).unwrap()).unwrap()
}

#[test]
fn full_pipeline_and_fused_equivalence() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    build_pipeline(dir);

    let unfused = eval(dir, "adapted.ck", "eval-unfused");
    let fused = eval(dir, "fused.ck", "eval-fused");
    for r in [&unfused, &fused] {
        let (s, t, h) = (r["source_mean"].as_f64().unwrap(), r["target_accuracy"].as_f64().unwrap(), r["h_score"].as_f64().unwrap());
        assert!((0.0..=100.0).contains(&s) && (0.0..=100.0).contains(&t));
        let expect = if s + t > 0.0 { 2.0 * s * t / (s + t) } else { 0.0 };
        assert!((h - expect).abs() < 1e-6);
        assert_eq!(r["source_accuracies"].as_array().unwrap().len(), 3);
        assert_eq!(r["fingerprint"].as_str().unwrap().len(), 64);
    }
    let gap = (unfused["target_accuracy"].as_f64().unwrap() - fused["target_accuracy"].as_f64().unwrap()).abs();
    assert!(gap <= 0.1, "fused and unfused target accuracy differ by {gap}");
    assert!(fused["flops"]["total"].as_u64() < unfused["flops"]["total"].as_u64());

    let csv = fs::read_to_string(dir.join("eval-fused/report.csv")).unwrap();
    assert!(csv.starts_with("method,target_domain,"));
    for f in ["sep.ck.run.json", "fused.ck.run.json", "data/run.json", "eval-fused/run.json"] {
        let run: Value = serde_json::from_str(&fs::read_to_string(dir.join(f)).unwrap()).unwrap();
        assert_eq!(run["fingerprint"].as_str().unwrap().len(), 64, "{f}");
    }

    let err = fails(dir, &["adapt", "--model", "fused.ck", "--target", "data/rotate_25.train.sprn", "--out", "x.ck"]);
    assert!(err.contains("model already fused"), "{err}");
    let err = fails(dir, &["fuse", "--model", "fused.ck", "--out", "x.ck"]);
    assert!(err.contains("model already fused"), "{err}");

    let flops = ok(dir, &["flops", "--model", "fused.ck"]);
    assert!(flops.contains("form fused") && flops.contains("total"));
}

#[test]
fn training_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["--seed", "3", "gen-data", "--domains", "identity", "--classes", "3", "--per-class", "6", "--out", "d"]);
    let train = |out: &str, seed: &str| {
        ok(dir, &["--seed", seed, "train-source", "--domain", "d/identity.train.sprn", "--arch", "widths=4-8,classes=3", "--epochs", "2", "--out", out]);
        fs::read(dir.join(out)).unwrap()
    };
    assert_eq!(train("a.ck", "7"), train("b.ck", "7"));
    assert_ne!(train("a.ck", "7"), train("c.ck", "8"));
}

#[test]
fn errors_are_single_lines_with_exit_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fails(dir, &["fuse", "--model", "a.ck", "--bogus"]);
    fails(dir, &["flops", "--model", "missing.ck"]);
    fs::write(dir.join("junk.ck"), b"XXXX\x01\x00\x00\x00").unwrap();
    let err = fails(dir, &["flops", "--model", "junk.ck"]);
    assert!(err.contains("bad"), "{err}");
    fails(dir, &["--precision", "f16", "flops", "--model", "a.ck"]);
    fails(dir, &["train-source", "--domain", "missing.sprn"]);
}

#[test]
fn experiment_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = r#"{
        "classes": 3,
        "domains": ["identity", "invert", "noise:0.1"],
        "targets": [1],
        "train_per_class": 6,
        "test_per_class": 3,
        "arch": {"in_channels": 3, "image_size": 16, "widths": [4, 8], "kernel": 3, "stride": 2, "padding": 1, "classes": 3},
        "pretrain": {"per_class": 4, "train": {"epochs": 1, "batch_size": 8}},
        "source": {"epochs": 1, "batch_size": 8},
        "adapt": {"epochs": 1, "batch_size": 8},
        "kd": {"epochs": 1, "batch_size": 8},
        "ablation": true
    }"#;
    fs::write(dir.join("exp.json"), config).unwrap();
    let table = ok(dir, &["experiment", "--config", "exp.json", "--out", "report"]);
    assert!(table.contains("seprep") && table.contains("shot-ens+kd"));
    let csv = fs::read_to_string(dir.join("report/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert_eq!(fs::read_to_string(dir.join("report/ablation.csv")).unwrap().lines().count(), 4);

    fs::write(dir.join("bad.json"), r#"{"methods": ["nope"]}"#).unwrap();
    fails(dir, &["experiment", "--config", "bad.json"]);
}
