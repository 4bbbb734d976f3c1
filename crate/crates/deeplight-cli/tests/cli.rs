//! End-to-end command-line tests against the built binary.

use std::path::Path;
use std::process::Command;

fn deeplight() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deeplight"))
}

#[test]
fn no_arguments_prints_usage_and_exits_one() {
    let out = deeplight().output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(text.contains("Usage"), "no usage text:\n{text}");
}

#[test]
fn unknown_flag_is_rejected() {
    let out = deeplight()
        .args(["synth", "--out", "/tmp/x", "--bogus-flag", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = deeplight()
        .args([
            "synth",
            "--out",
            data.to_str().unwrap(),
            "--tasks",
            "7",
            "--subjects",
            "2",
            "--dims",
            "8x9x6",
            "--trs-per-block",
            "2",
            "--seed",
            "7",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 14); // 2 subjects x 7 tasks
    assert_eq!(manifest["tasks"].as_array().unwrap().len(), 7);
    assert!(data.join("config.resolved.txt").exists());
    // Seed and config hash logged to stderr.
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seed=7") && err.contains("config_hash="), "{err}");
}

#[test]
fn missing_dataset_is_data_error_exit_two() {
    let out = deeplight()
        .args(["evaluate", "--checkpoint", "/nonexistent.ckpt", "--data", "/nonexistent"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

fn synth_tiny(data: &Path) {
    let out = deeplight()
        .args([
            "synth",
            "--out",
            data.to_str().unwrap(),
            "--subjects",
            "4",
            "--dims",
            "8x9x6",
            "--trs-per-block",
            "2",
            "--noise",
            "2.0",
            "--seed",
            "3",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_pipeline_smoke() {
    // synth -> pretrain (2 epochs) -> compare (1 fraction, 2 epochs) ->
    // evaluate -> report, all at toy scale.
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_tiny(&data);

    let run = dir.path().join("run");
    let out = deeplight()
        .args([
            "pretrain",
            "--data",
            data.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--train-subjects",
            "2",
            "--val-subjects",
            "2",
            "--epochs",
            "2",
            "--batch-size",
            "8",
            "--learning-rate",
            "0.001",
            "--dropout",
            "none",
            "--seed",
            "1",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("checkpoints").join("pretrained.ckpt");
    assert!(ckpt.exists());
    assert!(run.join("metrics").join("pretrain.csv").exists());
    assert!(run.join("metrics").join("per_task.json").exists());

    let cmp_dir = dir.path().join("cmp");
    let out = deeplight()
        .args([
            "compare",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            cmp_dir.to_str().unwrap(),
            "--train-subjects",
            "2",
            "--val-subjects",
            "2",
            "--fractions",
            "0.5,1.0",
            "--epochs",
            "2",
            "--batch-size",
            "8",
            "--dropout",
            "none",
            "--seed",
            "2",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cmp_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 2);
    assert!(cmp_dir.join("summary.csv").exists());
    assert!(cmp_dir.join("learning_curves.csv").exists());

    let metrics_file = dir.path().join("eval.json");
    let out = deeplight()
        .args([
            "evaluate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            metrics_file.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(metrics_file.exists());

    let out = deeplight()
        .args(["report", "--run", cmp_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn compare_with_default_fractions_has_seven_cells() {
    // Uses the paper's seven-fraction plan end to end at toy scale; the
    // Bonferroni level in the report must be 0.05/7.
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_tiny(&data);

    let run = dir.path().join("run");
    let out = deeplight()
        .args([
            "pretrain",
            "--data",
            data.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--train-subjects",
            "2",
            "--val-subjects",
            "2",
            "--epochs",
            "1",
            "--batch-size",
            "8",
            "--dropout",
            "none",
            "--seed",
            "1",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("checkpoints").join("pretrained.ckpt");

    let cmp_dir = dir.path().join("cmp");
    let out = deeplight()
        .args([
            "compare",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            cmp_dir.to_str().unwrap(),
            "--train-subjects",
            "2",
            "--val-subjects",
            "2",
            "--epochs",
            "1",
            "--batch-size",
            "8",
            "--dropout",
            "none",
            "--seed",
            "2",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cmp_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 7);
    let alpha = report["config"]["alpha"].as_f64().unwrap();
    assert!((alpha - 0.05 / 7.0).abs() < 1e-12);
}
