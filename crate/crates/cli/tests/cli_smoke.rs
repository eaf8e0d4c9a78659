//! End-to-end smoke test of the binary: every subcommand once, checking exit
//! codes and artifacts.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stbl"))
}

fn write_config(dir: &Path) -> PathBuf {
    let config = serde_json::json!({
        "network": {
            "variant": "resnet-d",
            "m": 1,
            "height": 8,
            "width": 8,
            "depth": 1,
            "d1": 2,
            "classes": 2,
            "use_batchnorm": true,
            "padding": "periodic"
        },
        "train": {
            "optimizer": {
                "batch_size": 8,
                "learning_rate": 0.1,
                "decay_steps": 40,
                "total_steps": 60,
                "alpha": 1e-4,
                "seed": 7,
                "eval_interval": 30
            },
            "dataset": {
                "synthetic": {
                    "classes": 2,
                    "height": 8,
                    "width": 8,
                    "train_per_class": 16,
                    "test_per_class": 8,
                    "noise": 0.2,
                    "seed": 5
                }
            },
            "normalize": false
        },
        "certify": { "growth_inputs": 3, "sensitivity_pairs": 3 },
        "perturb": {
            "noise": [
                { "unstructured": { "sigma": 0.02, "seed": 3 } },
                { "structured": { "epsilon": 0.25, "x0_test_index": 0, "seed": 3 } }
            ]
        },
        "integrate": {
            "variant": "general",
            "horizon": 1.0,
            "tau": 0.001,
            "x0": [1.0],
            "a1": { "times": [0.0], "values": [[[1.0]]] },
            "a2": { "times": [0.0], "values": [[[-1.0]]] },
            "b1": { "times": [0.0], "values": [[0.0]] },
            "b2": { "times": [0.0], "values": [[0.0]] },
            "envelopes": ["growth-general"]
        }
    });
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn full_pipeline() {
    let dir = std::env::temp_dir().join("stbl-cli-smoke");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let config = write_config(&dir);
    let out = dir.join("out");
    let cfg = config.to_str().unwrap();
    let out_s = out.to_str().unwrap();

    // init
    let status = bin()
        .args(["init", "--config", cfg, "--out", out_s])
        .status()
        .unwrap();
    assert!(status.success());
    let model = out.join("model.stbl");
    assert!(model.exists());
    let model_s = model.to_str().unwrap().to_string();

    // certify
    let output = bin()
        .args(["certify", "--config", cfg, "--out", out_s, "--model", &model_s])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("growth.c"));
    assert!(out.join("certificate.txt").exists());

    // verify (fresh random parameters usually violate hypotheses: the
    // command reports and exits cleanly either way)
    let status = bin()
        .args(["verify", "--config", cfg, "--out", out_s, "--model", &model_s])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("verify.txt").exists());

    // train
    let status = bin()
        .args(["train", "--config", cfg, "--out", out_s, "--threads", "2"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("history.tsv").exists());

    // forward on a tensor written by hand
    let input = dir.join("input.stbl");
    {
        let x = stbl_core::Feature64::from_fn(8, 8, 1, |i, j, _| ((i + j) % 3) as f64 / 2.0);
        let mut f = std::fs::File::create(&input).unwrap();
        x.write_stbl(&mut f).unwrap();
    }
    let status = bin()
        .args([
            "forward",
            "--config",
            cfg,
            "--out",
            out_s,
            "--model",
            &model_s,
            "--input",
            input.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("output.stbl").exists());
    assert!(out.join("trace.tsv").exists());

    // perturb (trained model is at out/model.stbl after train)
    let status = bin()
        .args(["perturb", "--config", cfg, "--out", out_s, "--model", &model_s])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("noise_table.tsv").exists());

    // integrate: the scalar exponential reaches e within 1e-3
    let output = bin()
        .args(["integrate", "--config", cfg, "--out", out_s])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8_lossy(&output.stdout);
    let line = text
        .lines()
        .find(|l| l.starts_with("final state"))
        .expect("final state line");
    let value: f64 = line
        .split('[')
        .nth(1)
        .unwrap()
        .trim_end_matches(']')
        .parse()
        .unwrap();
    assert!((value - std::f64::consts::E).abs() / std::f64::consts::E < 1e-3);
    assert!(out.join("trajectory.tsv").exists());

    // oracle (small grid for speed)
    let status = bin()
        .args(["oracle", "--per-shape", "2", "--out", out_s])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("oracle.txt").exists());

    // bad config exits with 2
    let bad = dir.join("bad.json");
    std::fs::write(&bad, "{\"network\": {\"unknown_key\": 1}}").unwrap();
    let status = bin()
        .args(["init", "--config", bad.to_str().unwrap(), "--out", out_s])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
