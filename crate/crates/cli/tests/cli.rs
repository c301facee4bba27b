use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tdcae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdcae"))
        .current_dir(dir)
        .env_remove("TDCAE_CMAPSS_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &str = r#"
seeds = [0, 1]
out = "runs"
[data]
subset = "synthetic"
[synthetic]
n_engines = 12
min_life = 100
max_life = 140
[training]
epochs = 3
"#;

fn small_config(dir: &Path) {
    fs::write(dir.join("run.toml"), SMALL).unwrap();
}

#[test]
fn simulate_writes_trajectory_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    ok(&tdcae(dir.path(), &["simulate", "--out", "sim"]));
    let csv = fs::read_to_string(dir.path().join("sim/trajectory.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,theta,theta_dot");
    assert_eq!(csv.lines().count(), 20_001 + 1);
    let report = json(&dir.path().join("sim/box_counting.json"));
    assert_eq!(
        report["box_counting"]["counts"].as_array().unwrap().len(),
        17
    );
    assert_eq!(report["drift"], true);
    assert_eq!(report["bounded"], false);

    ok(&tdcae(
        dir.path(),
        &["simulate", "--out", "still", "--no-drift"],
    ));
    let report = json(&dir.path().join("still/box_counting.json"));
    assert_eq!(report["bounded"], true);
    assert_eq!(report["config"]["alpha"], 0.0);
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["simulate", "--dt", "0"][..],
        &["simulate", "--dt", "-1"],
        &["train", "--subset", "fd009"],
        &["bogus"],
    ] {
        let out = tdcae(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
    let out = tdcae(dir.path(), &["detect", "--checkpoint", "missing.json"]);
    assert!(!out.status.success());
    fs::write(dir.path().join("bad.toml"), "seeds = []\n").unwrap();
    let out = tdcae(
        dir.path(),
        &["--config", "bad.toml", "train", "--subset", "synthetic"],
    );
    assert!(!out.status.success());
}

#[test]
fn missing_dataset_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = tdcae(
        dir.path(),
        &[
            "train",
            "--subset",
            "fd001",
            "--data-dir",
            "empty",
            "--out",
            "runs",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
    assert!(!dir.path().join("runs/seed_0").exists());
}

#[test]
fn train_detect_diagnose_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    ok(&tdcae(d, &["--config", "run.toml", "train"]));
    for seed in [0, 1] {
        let s = d.join(format!("runs/seed_{seed}"));
        assert!(s.join("checkpoint.json").is_file());
        assert!(!s.join("checkpoint.json.tmp").exists());
        assert_eq!(
            fs::read_to_string(s.join("loss.csv"))
                .unwrap()
                .lines()
                .count(),
            4
        );
        let m = json(&s.join("metrics.json"));
        assert_eq!(m["weight_macs"], 2688);
    }
    assert_eq!(
        json(&d.join("runs/summary.json"))["seeds"]
            .as_array()
            .unwrap()
            .len(),
        2
    );

    ok(&tdcae(
        d,
        &[
            "--config",
            "run.toml",
            "detect",
            "--checkpoint",
            "runs/seed_0/checkpoint.json",
            "--out",
            "det",
        ],
    ));
    let det = fs::read_to_string(d.join("det/detections.csv")).unwrap();
    assert_eq!(det.lines().next().unwrap(), "unit,cycle,votes,label,truth");
    let stored = json(&d.join("runs/seed_0/metrics.json"))["metrics"].clone();
    assert_eq!(json(&d.join("det/metrics.json"))["metrics"], stored);

    ok(&tdcae(
        d,
        &[
            "--config",
            "run.toml",
            "detect",
            "--checkpoint",
            "runs/seed_0/checkpoint.json",
            "--engines",
            "train",
            "--out",
            "det_train",
        ],
    ));
    assert_eq!(json(&d.join("det_train/metrics.json"))["engines"], "train");

    ok(&tdcae(
        d,
        &[
            "--config",
            "run.toml",
            "diagnose",
            "--checkpoint",
            "runs/seed_0/checkpoint.json",
            "--out",
            "diag",
        ],
    ));
    let diag = json(&d.join("diag/diagnostics.json"));
    assert_eq!(diag["rho_table"].as_array().unwrap().len(), 4);
    assert!(diag["jacobian"]["full_rank_fraction"].as_f64().unwrap() > 0.9);

    let out = tdcae(d, &["report", "runs", "--out", "rep"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("| 2 |"));
    assert_eq!(json(&d.join("rep/report.json"))["n"], 2);
}

#[test]
fn latent_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    ok(&tdcae(
        d,
        &[
            "--config", "run.toml", "train", "--seed", "0", "--epochs", "1",
        ],
    ));
    let cfg = format!("{SMALL}\n[detector]\nlatent_dim = 4\n");
    fs::write(d.join("mismatch.toml"), cfg).unwrap();
    let out = tdcae(
        d,
        &[
            "--config",
            "mismatch.toml",
            "detect",
            "--checkpoint",
            "runs/seed_0/checkpoint.json",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("latent"));
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    ok(&tdcae(
        d,
        &["--config", "run.toml", "train", "--seed", "7", "--out", "a"],
    ));
    ok(&tdcae(
        d,
        &["--config", "run.toml", "train", "--seed", "7", "--out", "b"],
    ));
    for f in [
        "seed_7/checkpoint.json",
        "seed_7/loss.csv",
        "seed_7/metrics.json",
        "summary.json",
    ] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    ok(&tdcae(
        d,
        &[
            "--config",
            "run.toml",
            "train",
            "--seed",
            "3",
            "--alpha",
            "0",
            "--stop-gradient",
            "--epochs",
            "1",
        ],
    ));
    let ck = json(&d.join("runs/seed_3/checkpoint.json"));
    assert_eq!(ck["training"]["alpha"], 0.0);
    assert_eq!(ck["training"]["gradient_flow"], "stop_gradient");
    assert_eq!(ck["training"]["epochs"], 1);
}
