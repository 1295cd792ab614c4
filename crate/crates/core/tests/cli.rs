//! End-to-end runs of the binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_heritage-fusion");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("HERITAGE_FUSION_OUT", dir.join("default-out"))
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, contents).unwrap();
    p
}

/// Small dataset plus a short two-seed run config.
fn fixture() -> TempDir {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "spec.json", r#"{"n_samples": 80, "d_s": 5, "d_i": 7, "missing_image_fraction": 0.1}"#);
    write(d, "run.json", r#"{"train": {"max_epochs": 3, "augment": {"replication": 2}}, "seeds": 2}"#);
    let o = run(d, &["synth", "--spec", "spec.json", "--out", "data.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    tmp
}

fn train(d: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", "run.json", "--data", "data.csv", "--out", out, "--quiet"];
    args.extend_from_slice(extra);
    run(d, &args)
}

#[test]
fn synth_writes_requested_rows_deterministically() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "spec.json", r#"{"n_samples": 2000, "d_s": 28, "d_i": 16, "seed": 4}"#);
    for name in ["a.csv", "b.csv"] {
        let o = run(d, &["synth", "--spec", "spec.json", "--out", name]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(d.join("a.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("b.csv")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 2001);

    write(d, "bad.json", r#"{"redundancy": 0.7, "complementarity": 0.5}"#);
    let o = run(d, &["synth", "--spec", "bad.json", "--out", "c.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.join("c.csv").exists());
    let o = run(d, &["synth", "--spec", "spec.json", "--out", "a.csv"]);
    assert_eq!(o.status.code(), Some(2), "existing file must not be overwritten");
}

#[test]
fn missing_data_file_is_a_usage_error_naming_the_path() {
    let tmp = TempDir::new().unwrap();
    let o = run(tmp.path(), &["train", "--data", "nowhere/absent.csv", "--quiet"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere/absent.csv"), "{}", stderr(&o));
    let o = run(tmp.path(), &["train", "--data", "x.csv", "--config", "a.json", "--paper-defaults"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_is_a_usage_error() {
    let tmp = fixture();
    let d = tmp.path();
    write(d, "typo.json", r#"{"train": {"learning_rate": 0.1}}"#);
    let o = run(d, &["train", "--config", "typo.json", "--data", "data.csv", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    let o = train(d, "y", &["--seeds", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_eval_reproduces_metrics() {
    let tmp = fixture();
    let d = tmp.path();
    let o = train(d, "runs/a", &["--jobs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run_dir = d.join("runs/a");
    for f in ["config.json", "metrics.json", "confusion.csv", "manifest.json", "checkpoints/seed-0.json", "records/seed-1.json"] {
        assert!(run_dir.join(f).is_file(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(run_dir.join("manifest.json")).unwrap()).unwrap();
    let mut listed: Vec<String> = manifest["artifacts"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    listed.sort();
    let mut on_disk = Vec::new();
    for sub in ["", "checkpoints", "records"] {
        for e in fs::read_dir(run_dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                on_disk.push(p.strip_prefix(&run_dir).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    on_disk.sort();
    assert_eq!(listed, on_disk);
    assert_eq!(manifest["seeds"], serde_json::json!([0, 1]));

    let metrics = fs::read(run_dir.join("metrics.json")).unwrap();
    let o = run(d, &["eval", "--checkpoints", "runs/a", "--data", "data.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(o.stdout, metrics);

    // Identical config, other worker count, config taken from the run itself.
    let o = run(d, &["train", "--config", "runs/a/config.json", "--data", "data.csv", "--out", "runs/b", "--jobs", "2", "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(d.join("runs/b/metrics.json")).unwrap(), metrics);
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let tmp = fixture();
    let d = tmp.path();
    assert!(train(d, "out", &["--seeds", "1"]).status.success());
    let before = fs::read(d.join("out/metrics.json")).unwrap();
    let o = train(d, "out", &["--seeds", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"));
    assert_eq!(fs::read(d.join("out/metrics.json")).unwrap(), before);
    let o = train(d, "out", &["--seeds", "1", "--force"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!d.join("out/checkpoints/seed-1.json").exists());
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(d.join("out/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["seeds"], serde_json::json!([0]));
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let tmp = fixture();
    let d = tmp.path();
    let o = run(d, &["train", "--config", "run.json", "--data", "data.csv", "--seeds", "1", "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("default-out/train/metrics.json").is_file());
}

#[test]
fn benchmark_and_sweep_emit_reports() {
    let tmp = fixture();
    let d = tmp.path();
    let o = run(d, &["benchmark", "--spec", "spec.json", "--config", "run.json", "--seeds", "1", "--kinds", "sensor_only,perceiver", "--out", "bench", "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("bench/benchmark.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("bench/benchmark.json")).unwrap()).unwrap();
    let ours = report["rows"].as_array().unwrap().iter().find(|r| r["model"] == "ours").unwrap();
    assert_eq!(ours["reference"]["accuracy"], serde_json::json!(0.769));

    let o = run(d, &["benchmark", "--spec", "spec.json", "--kinds", "resnet", "--out", "bench2"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(d, &["sweep", "--spec", "spec.json", "--config", "run.json", "--seeds", "1", "--taus", "0.1,0.3,0.5,0.7,0.9", "--out", "sweep", "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let curve = fs::read_to_string(d.join("sweep/tau_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 6);
}

#[test]
fn gradcheck_passes_and_reports_the_error() {
    let tmp = TempDir::new().unwrap();
    let o = run(tmp.path(), &["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("max relative error"));
    assert_eq!(out.lines().filter(|l| l.ends_with("ok")).count(), 6);
}
