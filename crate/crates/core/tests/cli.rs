use std::path::Path;
use std::process::{Command, Output};

fn ttac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttac")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = ttac(args);
    assert!(
        out.status.success(),
        "ttac {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn final_error(dir: &Path) -> f64 {
    let text = std::fs::read_to_string(dir.join("report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["final_error"].as_f64().unwrap()
}

#[test]
fn end_to_end_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = root.join("spec.json");
    std::fs::write(&spec, r#"{"samples_per_class": 200, "val_per_class": 50, "target_samples": 768}"#).unwrap();
    let data = root.join("data");
    ok(&["bench", "gen", "--spec", p(&spec), "--seed", "3", "--out", p(&data)]);
    for f in ["source_train.csv", "source_val.csv", "target.csv", "spec.json"] {
        assert!(data.join(f).is_file(), "{f}");
    }

    let model = root.join("model.json");
    let stats = root.join("stats.json");
    let out = ok(&[
        "train-source",
        "--train",
        p(&data.join("source_train.csv")),
        "--val",
        p(&data.join("source_val.csv")),
        "--out-model",
        p(&model),
        "--out-stats",
        p(&stats),
    ]);
    assert!(out.contains("validation accuracy"));

    let config = root.join("config.json");
    std::fs::write(&config, r#"{"n_b": 128, "n_c": 384, "lr": 0.0007, "n_clip_k": 256, "stat_gradient": "mean_only", "regularizer": {"relative": 0.1, "floor": 1e-8}}"#).unwrap();
    let target = data.join("target.csv");

    let test_dir = root.join("test");
    ok(&["baseline", "--model", p(&model), "--stream", p(&target), "--config", p(&config), "--out", p(&test_dir)]);
    let sl_dir = root.join("sl");
    ok(&[
        "adapt", "--model", p(&model), "--stream", p(&target), "--config", p(&config),
        "--source-stats", p(&stats), "--out", p(&sl_dir),
    ]);
    for f in ["report.json", "cumulative_error.csv", "predictions.csv"] {
        assert!(sl_dir.join(f).is_file(), "{f}");
    }
    let predictions = std::fs::read_to_string(sl_dir.join("predictions.csv")).unwrap();
    assert_eq!(predictions.lines().next(), Some("arrival,id,label,truth"));
    assert_eq!(predictions.lines().count(), 769);
    assert!(final_error(&sl_dir) < final_error(&test_dir));

    // Replays are identical.
    let again = root.join("sl2");
    ok(&[
        "adapt", "--model", p(&model), "--stream", p(&target), "--config", p(&config),
        "--source-stats", p(&stats), "--out", p(&again),
    ]);
    assert_eq!(
        std::fs::read(sl_dir.join("predictions.csv")).unwrap(),
        std::fs::read(again.join("predictions.csv")).unwrap()
    );

    let inferred = root.join("inferred.json");
    let out = ok(&["infer-source", "--model", p(&model), "--out", p(&inferred)]);
    assert!(out.contains("self-consistent"));

    // An inferred bank is rejected under a source-labelled protocol.
    let bad = ttac(&[
        "adapt", "--model", p(&model), "--stream", p(&target), "--config", p(&config),
        "--source-stats", p(&inferred), "--out", p(&root.join("bad")),
    ]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("provenance"));

    let sf_dir = root.join("sf");
    ok(&[
        "adapt", "--model", p(&model), "--stream", p(&target), "--config", p(&config),
        "--protocol", "N-O-SF", "--source-stats", p(&inferred), "--out", p(&sf_dir),
    ]);
    let sf_auto = root.join("sf_auto");
    ok(&[
        "adapt", "--model", p(&model), "--stream", p(&target), "--config", p(&config),
        "--protocol", "N-O-SF", "--infer-source", "--out", p(&sf_auto),
    ]);
    assert!(final_error(&sf_dir).is_finite());
    assert!(final_error(&sf_auto).is_finite());
}

#[test]
fn grid_run_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = tmp.path().join("grid.json");
    std::fs::write(
        &grid,
        r#"{"cells": [
            {"name": "test", "method": "TEST", "protocol": "N-O-SL",
             "domain": {"samples_per_class": 200, "val_per_class": 50, "target_samples": 512}, "seeds": [0, 1]},
            {"name": "ttac", "method": "TTAC++", "protocol": "N-O-SL",
             "domain": {"samples_per_class": 200, "val_per_class": 50, "target_samples": 512}, "seeds": [0, 1],
             "overrides": {"n_b": 128}}
        ]}"#,
    )
    .unwrap();
    let out = tmp.path().join("out");
    let stdout = ok(&["bench", "run", "--grid", p(&grid), "--out", p(&out)]);
    assert!(stdout.contains("test: TEST N-O-SL median error"));
    assert!(out.join("results.json").is_file());
    assert!(out.join("results.csv").is_file());
    ok(&["bench", "report", "--in", p(&out)]);
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(report.starts_with("cell,method,protocol,severity,error_pct,std_pct,median_pct,n"));
    assert_eq!(report.lines().count(), 3);
    assert!(out.join("cumulative_error.dat").is_file());
}

#[test]
fn usage_errors_fail() {
    // adapt needs either --source-stats or --infer-source
    let out = ttac(&["adapt", "--model", "m.json", "--stream", "s.csv", "--out", "o"]);
    assert!(!out.status.success());
    let out = ttac(&[
        "adapt", "--model", "m.json", "--stream", "s.csv", "--out", "o",
        "--source-stats", "b.json", "--infer-source",
    ]);
    assert!(!out.status.success());
    let out = ttac(&["baseline", "--model", "/nonexistent.json", "--stream", "s.csv", "--out", "o"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = ttac(&["baseline", "--method", "TTAC++", "--model", "m", "--stream", "s", "--out", "o"]);
    assert!(!out.status.success());
}
