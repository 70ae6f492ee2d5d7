//! End-to-end runs of the `advloop` binary: exit codes, file outputs,
//! quantized feasibility, and report determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_advloop"))
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("advloop-cli-{name}"));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// A small configuration so the smoke pipeline stays fast.
fn smoke_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        serde_json::json!({
            "image": {"channels": 3, "height": 16, "width": 16},
            "dataset": {"train_samples": 60, "holdout_samples": 8},
            "training": {"epochs": 20, "learning_rate": 0.02},
            "run": {"max_iterations": 1, "max_blind_queries": 200},
            "cw": {"c": 8.0, "eta": 0.02, "iterations": 10},
            "jsma": {"step": 0.03, "top_k": 2, "iterations": 5},
            "sta": {"gamma": 0.5, "t_sta": 3, "s_min": 0.0, "s_max": 1.5, "theta": 0.1},
            "mixer": {"hill_iters": 15}
        })
        .to_string(),
    )
    .unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn invalid_config_exits_with_code_two_and_names_the_key() {
    let dir = fresh_dir("badconfig");
    let config = dir.join("bad.json");
    std::fs::write(&config, r#"{"run": {"eps": 2.0}}"#).unwrap();
    let out = bin()
        .args(["gen-data", "--out-dir"])
        .arg(dir.join("data"))
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("run.eps"), "stderr: {stderr}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn missing_models_dir_exits_with_io_code() {
    let dir = fresh_dir("nomodels");
    let input = dir.join("input");
    std::fs::create_dir_all(&input).unwrap();
    let out = bin()
        .args(["attack", "--models-dir"])
        .arg(dir.join("does-not-exist"))
        .arg("--input")
        .arg(&input)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn full_pipeline_smoke_run() {
    let dir = fresh_dir("pipeline");
    let config = smoke_config(&dir);
    let data = dir.join("data");
    let models = dir.join("models");

    run_ok(bin()
        .args(["gen-data", "--seed", "3"])
        .arg("--config")
        .arg(&config)
        .arg("--out-dir")
        .arg(&data));
    assert!(data.join("train/manifest.json").exists());
    assert!(data.join("holdout/manifest.json").exists());

    run_ok(bin()
        .args(["train", "--seed", "3"])
        .arg("--config")
        .arg(&config)
        .arg("--data-dir")
        .arg(data.join("train"))
        .arg("--out-dir")
        .arg(&models));
    for file in ["surrogate_a.alm", "surrogate_b.alm", "blind.alm", "training.json"] {
        assert!(models.join(file).exists(), "{file} missing");
    }

    // Attack the holdout directory.
    let out_dir = dir.join("attack");
    run_ok(bin()
        .args(["attack", "--seed", "3"])
        .arg("--config")
        .arg(&config)
        .arg("--models-dir")
        .arg(&models)
        .arg("--input")
        .arg(data.join("holdout"))
        .arg("--out-dir")
        .arg(&out_dir));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["images"].as_array().unwrap().len(), 8);
    assert!(out_dir.join("metrics.csv").exists());

    // Quantized adversarial images stay within eps + 1/255 of the original.
    let adv_files: Vec<_> = std::fs::read_dir(out_dir.join("images"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(adv_files.len(), 8);
    let eps_max = 16.0 / 255.0; // escalation cap
    for adv_path in &adv_files {
        let name = adv_path.file_name().unwrap().to_string_lossy().into_owned();
        let orig = data.join("holdout").join(name.replace("_adv", ""));
        let x = advloop_core::imageio::image_read(&orig).unwrap();
        let adv = advloop_core::imageio::image_read(adv_path).unwrap();
        for (a, b) in x.data().iter().zip(adv.data()) {
            assert!((a - b).abs() <= eps_max + 1.0 / 255.0 + 1e-12);
        }
    }

    // Offline evaluation over the written artifacts.
    let eval_dir = dir.join("eval");
    run_ok(bin()
        .arg("evaluate")
        .arg("--models-dir")
        .arg(&models)
        .arg("--originals")
        .arg(data.join("holdout"))
        .arg("--adversarial")
        .arg(out_dir.join("images"))
        .arg("--out-dir")
        .arg(&eval_dir));
    assert!(eval_dir.join("evaluation.json").exists());
    assert!(eval_dir.join("metrics.csv").exists());

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn attack_reports_are_deterministic() {
    let dir = fresh_dir("determinism");
    let config = smoke_config(&dir);
    let data = dir.join("data");
    let models = dir.join("models");
    run_ok(bin()
        .args(["gen-data", "--seed", "5"])
        .arg("--config")
        .arg(&config)
        .arg("--out-dir")
        .arg(&data));
    run_ok(bin()
        .args(["train", "--seed", "5"])
        .arg("--config")
        .arg(&config)
        .arg("--data-dir")
        .arg(data.join("train"))
        .arg("--out-dir")
        .arg(&models));

    let mut reports = Vec::new();
    for pass in 0..2 {
        let out_dir = dir.join(format!("attack{pass}"));
        run_ok(bin()
            .args(["attack", "--seed", "5"])
            .arg("--config")
            .arg(&config)
            .arg("--models-dir")
            .arg(&models)
            .arg("--input")
            .arg(data.join("holdout"))
            .arg("--out-dir")
            .arg(&out_dir));
        reports.push(std::fs::read(out_dir.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1], "reports differ between identical runs");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn empty_input_dir_succeeds_with_empty_report() {
    let dir = fresh_dir("empty");
    let config = smoke_config(&dir);
    let data = dir.join("data");
    let models = dir.join("models");
    run_ok(bin()
        .args(["gen-data", "--seed", "7"])
        .arg("--config")
        .arg(&config)
        .arg("--out-dir")
        .arg(&data));
    run_ok(bin()
        .args(["train", "--seed", "7"])
        .arg("--config")
        .arg(&config)
        .arg("--data-dir")
        .arg(data.join("train"))
        .arg("--out-dir")
        .arg(&models));

    let empty = dir.join("nothing");
    std::fs::create_dir_all(&empty).unwrap();
    let out_dir = dir.join("attack");
    run_ok(bin()
        .arg("attack")
        .arg("--config")
        .arg(&config)
        .arg("--models-dir")
        .arg(&models)
        .arg("--input")
        .arg(&empty)
        .arg("--out-dir")
        .arg(&out_dir));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["images"].as_array().unwrap().len(), 0);
    assert!(report["metrics"].is_null());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn single_file_attack_writes_one_adversarial_image() {
    let dir = fresh_dir("single");
    let config = smoke_config(&dir);
    let data = dir.join("data");
    let models = dir.join("models");
    run_ok(bin()
        .args(["gen-data", "--seed", "9"])
        .arg("--config")
        .arg(&config)
        .arg("--out-dir")
        .arg(&data));
    run_ok(bin()
        .args(["train", "--seed", "9"])
        .arg("--config")
        .arg(&config)
        .arg("--data-dir")
        .arg(data.join("train"))
        .arg("--out-dir")
        .arg(&models));

    let out_dir = dir.join("attack");
    run_ok(bin()
        .args(["attack", "--mode", "uniform-averaging"])
        .arg("--config")
        .arg(&config)
        .arg("--models-dir")
        .arg(&models)
        .arg("--input")
        .arg(data.join("holdout/img_0001.png"))
        .arg("--out-dir")
        .arg(&out_dir));
    assert!(out_dir.join("images/img_0001_adv.png").exists());
    assert!(out_dir.join("runs/img_0001.json").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn ablate_sweeps_all_four_modes() {
    let dir = fresh_dir("ablate");
    let config = smoke_config(&dir);
    let data = dir.join("data");
    let models = dir.join("models");
    run_ok(bin()
        .args(["gen-data", "--seed", "11"])
        .arg("--config")
        .arg(&config)
        .arg("--out-dir")
        .arg(&data));
    run_ok(bin()
        .args(["train", "--seed", "11"])
        .arg("--config")
        .arg(&config)
        .arg("--data-dir")
        .arg(data.join("train"))
        .arg("--out-dir")
        .arg(&models));

    let out_dir = dir.join("ablation");
    run_ok(bin()
        .args(["ablate", "--seeds", "11"])
        .arg("--config")
        .arg(&config)
        .arg("--models-dir")
        .arg(&models)
        .arg("--input")
        .arg(data.join("holdout"))
        .arg("--out-dir")
        .arg(&out_dir));

    let csv = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    for mode in [
        "full",
        "uniform_averaging",
        "no_info",
        "no_info_no_conductor",
    ] {
        assert!(csv.contains(mode), "missing {mode} row in:\n{csv}");
        assert!(out_dir.join(mode).join("seed_11/report.json").exists());
    }
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("ablation.json")).unwrap())
            .unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);
    std::fs::remove_dir_all(&dir).ok();
}
