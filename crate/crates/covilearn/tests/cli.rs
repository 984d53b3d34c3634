//! CLI integration: each verb through the real binary.

use std::path::Path;
use std::process::Command;

use covilearn::data::{synthetic, Label};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_covilearn"))
}

fn write_dataset(dir: &Path, count: usize) -> std::path::PathBuf {
    let manifest = synthetic::write_dataset(dir, count, 32, 17).unwrap();
    let path = dir.join("manifest.csv");
    manifest.write_csv(&path).unwrap();
    path
}

#[test]
fn inspect_prints_published_densenet_total() {
    let output = bin()
        .args(["inspect", "--variant", "densenet121-gapdense"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("7103234"), "{stdout}");
    assert!(stdout.contains("DNN-III"), "{stdout}");
    assert!(stdout.contains("head.dense1"), "{stdout}");
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), 60);
    let weights = dir.path().join("model.cvlw");
    let history = dir.path().join("history.json");
    let report = dir.path().join("report.json");
    let roc = dir.path().join("roc.csv");

    let output = bin()
        .args(["train", "--manifest"])
        .arg(&manifest)
        .args(["--variant", "micro", "--epochs", "10", "--seed", "7", "--lr", "0.01"])
        .arg("--out-weights")
        .arg(&weights)
        .arg("--out-history")
        .arg(&history)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(weights.exists());
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&history).unwrap()).unwrap();
    assert_eq!(parsed["history"].as_array().unwrap().len(), 10);
    assert_eq!(parsed["provenance"]["learning_rate"], 0.01);

    let output = bin()
        .args(["eval", "--manifest"])
        .arg(&manifest)
        .arg("--weights")
        .arg(&weights)
        .args(["--variant", "micro", "--seed", "7"])
        .arg("--out-report")
        .arg(&report)
        .arg("--out-roc")
        .arg(&roc)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "eval failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let report_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(report_json["accuracy"].as_f64().unwrap() >= 0.5);
    assert!(std::fs::read_to_string(&roc).unwrap().starts_with("fpr,tpr"));

    // Predict one of the dataset images.
    let image = dir.path().join("sample_0000.png");
    let output = bin()
        .args(["predict", "--image"])
        .arg(&image)
        .arg("--weights")
        .arg(&weights)
        .args(["--variant", "micro"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("label:"), "{stdout}");
    assert!(stdout.contains("probabilities:"), "{stdout}");
}

#[test]
fn eval_names_missing_image_path() {
    let dir = tempfile::tempdir().unwrap();
    // Manifest referencing a file that does not exist.
    let manifest_path = dir.path().join("manifest.csv");
    let mut manifest = covilearn::data::DatasetManifest::new();
    for i in 0..4 {
        manifest.push(dir.path().join(format!("gone_{i}.png")), Label::Covid).unwrap();
        manifest.push(dir.path().join(format!("also_{i}.png")), Label::Normal).unwrap();
    }
    manifest.write_csv(&manifest_path).unwrap();

    // Valid weights so the failure is exactly the missing image.
    let graph = covilearn::arch::assemble_model("micro".parse().unwrap());
    let store = covilearn::arch::init_parameters(&graph, 1);
    let weights = dir.path().join("w.cvlw");
    covilearn::arch::write_weights_file(&weights, &store, &graph).unwrap();

    let output = bin()
        .args(["eval", "--manifest"])
        .arg(&manifest_path)
        .arg("--weights")
        .arg(&weights)
        .args(["--variant", "micro"])
        .arg("--out-report")
        .arg(dir.path().join("r.json"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("gone_") || stderr.contains("also_"), "{stderr}");
}

#[test]
fn unknown_verb_prints_usage_and_fails() {
    let output = bin().arg("transmogrify").output().unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.to_lowercase().contains("usage"), "{stderr}");
}

#[test]
fn unknown_variant_fails_with_message() {
    let output = bin().args(["inspect", "--variant", "vgg16"]).output().unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("vgg16"), "{stderr}");
}

#[test]
fn env_var_supplies_weights_path() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), 20);
    let _ = manifest;
    let graph = covilearn::arch::assemble_model("micro".parse().unwrap());
    let store = covilearn::arch::init_parameters(&graph, 2);
    let weights = dir.path().join("env.cvlw");
    covilearn::arch::write_weights_file(&weights, &store, &graph).unwrap();

    let image = dir.path().join("sample_0000.png");
    let output = bin()
        .env("CVL_WEIGHTS", &weights)
        .args(["predict", "--image"])
        .arg(&image)
        .args(["--variant", "micro"])
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "predict with CVL_WEIGHTS failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}
