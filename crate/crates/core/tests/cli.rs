//! Drives the `kdaug` binary through all four verbs on a synthetic IDX set.

use std::fs;
use std::path::Path;
use std::process::Command;

use kdaug::harness::write_idx;
use kdaug::imageops::Image;
use kdaug::trainer::{Dataset, Split};

fn fixture(n: usize, offset: usize) -> Dataset {
    let images = (0..n)
        .map(|i| {
            let class = (i + offset) % 10;
            let mut px = vec![10u8; 28 * 28];
            for r in 0..28 {
                px[r * 28 + 2 * class + 4] = 240;
            }
            Image::new(28, 28, 1, px).unwrap()
        })
        .collect();
    let labels = (0..n).map(|i| (i + offset) % 10).collect();
    Dataset::new(images, labels, 10, Split::Train).unwrap()
}

fn write_fixture(dir: &Path) {
    for (name, data) in [("train", fixture(60, 0)), ("test", fixture(20, 3))] {
        let (imgs, labels) = write_idx(&data).unwrap();
        fs::write(dir.join(format!("{name}-images")), imgs).unwrap();
        fs::write(dir.join(format!("{name}-labels")), labels).unwrap();
    }
    let cfg = r#"{
      "data": {"format": "idx",
               "train_images": "train-images", "train_labels": "train-labels",
               "test_images": "test-images", "test_labels": "test-labels"},
      "train": {
        "epochs": 1, "batch_size": 16,
        "schedule": {"kind": "cosine", "base_lr": 0.05},
        "optimizer": {"kind": "sgd_momentum", "momentum": 0.9},
        "kd": {"lambda": 1.0, "k": 3},
        "policy": "randaugment n=2 m=3 space=destruction"
      },
      "teacher": {"path": "teacher.akdw"},
      "sweep": {"magnitudes": [0, 3], "modes": ["RA", "RA+KD"], "seeds": [1, 2],
                "space": "destruction"}
    }"#;
    fs::write(dir.join("exp.json"), cfg).unwrap();
}

fn kdaug(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_kdaug"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "kdaug {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn all_verbs_run_and_sweep_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_fixture(dir);
    let cfg = dir.join("exp.json");
    let cfg = cfg.to_str().unwrap();

    let out = kdaug(&["pretrain-teacher", "--config", cfg]);
    assert!(out.contains("teacher test error"));
    assert!(dir.join("teacher.akdw").exists());

    let model = dir.join("student.akdw");
    kdaug(&["train", "--config", cfg, "--seed", "4", "--out", model.to_str().unwrap()]);
    let history = fs::read_to_string(dir.join("student.history.json")).unwrap();
    assert!(history.contains("test_error"));

    let eval_json = dir.join("eval.json");
    let out = kdaug(&[
        "eval",
        "--config",
        cfg,
        "--params",
        model.to_str().unwrap(),
        "--out",
        eval_json.to_str().unwrap(),
    ]);
    assert!(out.starts_with("test error "));
    assert!(fs::read_to_string(&eval_json).unwrap().contains("test_error"));

    let (a, b) = (dir.join("sweep-a"), dir.join("sweep-b"));
    kdaug(&["sweep", "--config", cfg, "--out", a.to_str().unwrap()]);
    kdaug(&["sweep", "--config", cfg, "--out", b.to_str().unwrap()]);
    let csv = fs::read(a.join("sweep.csv")).unwrap();
    assert_eq!(csv, fs::read(b.join("sweep.csv")).unwrap());
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 2 * 2 * 2);
    let svg = fs::read_to_string(a.join("sweep.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert_eq!(fs::read_to_string(a.join("gain.csv")).unwrap().lines().count(), 3);
}

#[test]
fn bad_config_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"data": {"format": "idx"}, "bogus": 1}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_kdaug"))
        .args(["train", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
