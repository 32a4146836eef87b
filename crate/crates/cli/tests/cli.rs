use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "phantom": {"matrix": 32, "n_slices": 2, "n_echoes": 6},
  "simulation": {"amplitude_scale": 2.0, "seed": 1},
  "detector": {"iterations": 10},
  "orba": {"n_masks": 3},
  "evaluate": {"n_thresholds": 11}
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("small.json");
    if !cfg.exists() {
        fs::write(&cfg, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_t2moco"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--threads")
        .arg("1")
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr:\n{}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&run(tmp.path(), &["pipeline", "--out", "run"]));
    let root = tmp.path().join("run");
    for f in ["image", "coils", "field", "truth", "roi"] {
        assert!(root.join("phantom").join(format!("{f}.t2c")).exists(), "{f}");
    }
    for m in ["uncorrected", "phimo", "orba", "hrqr"] {
        assert!(root.join("reconstruct").join(m).join("maps.t2c").exists(), "{m}");
        assert!(root.join("evaluate/images").join(format!("{m}_diff_s1.pgm")).exists(), "{m}");
    }

    let mut rdr = csv::Reader::from_path(root.join("evaluate/metrics.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["subject", "slice", "method", "mask_mae", "accuracy", "t2star_mae_ms", "ssim"]);
    assert_eq!(rdr.records().count(), 8);

    let mut pr = csv::Reader::from_path(root.join("evaluate/pr_curve.csv")).unwrap();
    let methods: Vec<String> = pr.records().map(|r| r.unwrap()[0].to_string()).collect();
    for m in ["uncorrected", "phimo", "orba"] {
        assert_eq!(methods.iter().filter(|x| *x == m).count(), 11, "{m}");
    }

    let summary = json(&root.join("report/summary.json"));
    assert_eq!(summary["methods"].as_object().unwrap().len(), 4);
    assert_eq!(summary["acceptance"]["master_identity"], Value::Bool(true));
    assert_eq!(summary["acceptance"]["masked_equivalence"], Value::Bool(true));

    let masks = json(&root.join("detect/masks.json"));
    let trace = masks["loss_trace"].as_array().unwrap();
    assert!(trace.last().unwrap().as_f64() < trace[0].as_f64());
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        for cmd in ["phantom", "simulate", "detect"] {
            ok(&run(tmp.path(), &[cmd, "--out", out]));
        }
    }
    for f in ["phantom/image.t2c", "phantom/checks.json", "simulate/kspace.t2c", "simulate/plan.json", "detect/masks.json"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_amplitude_gives_clean_reference() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&run(tmp.path(), &["phantom", "--out", "r"]));
    ok(&run(tmp.path(), &["simulate", "--out", "r", "simulation.amplitude_scale=0"]));
    let refs = json(&tmp.path().join("r/simulate/reference_masks.json"));
    assert!(refs["slices"].as_array().unwrap().iter().flat_map(|s| s.as_array().unwrap()).all(|v| v.as_f64() == Some(1.0)));
    assert_eq!(json(&tmp.path().join("r/simulate/checks.json"))["corrupted_lines"], 0);
}

#[test]
fn report_without_metrics_is_empty() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["report", "--out", "r"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no metrics"));
    assert_eq!(json(&tmp.path().join("r/report/summary.json"))["methods"], serde_json::json!({}));
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(tmp.path(), &["reconstruct", "--method", "magic"]).status.code(), Some(2));
    assert_eq!(run(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(tmp.path(), &["phantom", "detector.learning_rat=1"]).status.code(), Some(2));
    let missing = run(tmp.path(), &["detect", "--out", "empty"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("run `simulate` first"));
}
