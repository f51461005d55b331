use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "backbone": {"base_channels": 8, "channel_multipliers": [1, 2], "time_embed_dim": 16, "cond_embed_dim": 8,
               "image_size": 16, "norm_groups": 4, "attn_heads": 2},
  "adapter": {"heads": 2, "levels": [1, 2]},
  "tasks": {"train_scenes": 8, "support_scenes": 6, "eval_scenes": 4},
  "train": {"pretrain_steps": 4, "pretrain_batch": 2, "meta_steps": 2, "queries_per_episode": 2, "log_every": 1},
  "finetune": {"max_steps": 3, "batch_size": 2, "eval_every": 1, "patience": 2, "shots": 6, "val_draws": 2},
  "inference": {"steps": 3, "support_pairs_at_inference": 2, "batch": 2}
}"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Env { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn fsc(&self, args: &[&str]) -> Output {
        let cfg = self.path("tiny.json");
        Command::new(env!("CARGO_BIN_EXE_fsc"))
            .args(args)
            .arg("--config")
            .arg(&cfg)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.fsc(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn s(&self, p: &str) -> String {
        self.path(p).to_string_lossy().into_owned()
    }
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_has_six_task_dirs_and_is_reproducible() {
    let env = Env::new();
    env.ok(&["dataset", "--out", &env.s("a")]);
    env.ok(&["dataset", "--out", &env.s("b")]);
    let m: Value = serde_json::from_slice(&std::fs::read(env.path("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["tasks"].as_array().unwrap().len(), 6);
    for t in ["edge", "seg", "depth", "blob", "inv_edge", "dilated_edge"] {
        assert!(env.path("a").join(t).join("eval").is_dir(), "missing {t}");
    }
    assert_eq!(m["pools"]["train"]["count"], 8);
    assert_eq!(files(&env.path("a")), files(&env.path("b")));
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let env = Env::new();
    std::fs::write(env.path("bad.json"), r#"{"train": {"learning_rat": 0.1}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fsc"))
        .args(["dataset", "--out", &env.s("d"), "--config", &env.s("bad.json")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rat"), "{err}");
    let out = env.fsc(&["dataset", "--out", &env.s("d"), "--set", "train.tasks_per_batch=0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mismatched_dataset_is_a_data_error() {
    let env = Env::new();
    env.ok(&["dataset", "--out", &env.s("data")]);
    let out = env.fsc(&["pretrain", "--data", &env.s("data"), "--out", &env.s("pre"), "--set", "tasks.dataset_seed=7"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergent_training_exits_with_numeric_code() {
    let env = Env::new();
    env.ok(&["dataset", "--out", &env.s("data")]);
    let out =
        env.fsc(&["pretrain", "--data", &env.s("data"), "--out", &env.s("pre"), "--set", "train.learning_rate=1e30"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!env.path("pre").exists());
}

#[test]
fn resumed_pretraining_matches_an_uninterrupted_run() {
    let env = Env::new();
    env.ok(&["dataset", "--out", &env.s("data")]);
    env.ok(&["pretrain", "--data", &env.s("data"), "--out", &env.s("full")]);
    env.ok(&["pretrain", "--data", &env.s("data"), "--out", &env.s("half"), "--set", "train.pretrain_steps=2"]);
    env.ok(&["pretrain", "--data", &env.s("data"), "--out", &env.s("resumed"), "--resume", &env.s("half")]);
    let tensors = |d: &str| files(&env.path(d).join("tensors"));
    assert_eq!(tensors("full"), tensors("resumed"));
    assert_eq!(files(&env.path("full/optimizer")), files(&env.path("resumed/optimizer")));
}

#[test]
fn full_pipeline_produces_stamped_artifacts() {
    let env = Env::new();
    env.ok(&["dataset", "--out", &env.s("data")]);
    env.ok(&["pretrain", "--data", &env.s("data"), "--out", &env.s("pre")]);
    env.ok(&["meta-train", "--data", &env.s("data"), "--backbone", &env.s("pre"), "--out", &env.s("meta")]);
    env.ok(&[
        "finetune",
        "--checkpoint",
        &env.s("meta"),
        "--task",
        "inv_edge",
        "--support-dir",
        &env.s("data"),
        "--out",
        &env.s("ft"),
    ]);

    let report: Value = serde_json::from_slice(&std::fs::read(env.path("ft/report.json")).unwrap()).unwrap();
    let changed: Vec<&str> = report["changed"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(changed.iter().all(|p| ["task_biases", "matching_sigma", "projections_z"].contains(p)), "{changed:?}");
    assert!(report["steps"].as_u64().unwrap() <= 3);

    let gen = [
        "generate",
        "--checkpoint",
        &env.s("ft"),
        "--task",
        "inv_edge",
        "--support-dir",
        &env.s("data"),
        "--n-images",
        "3",
    ];
    env.ok(&[&gen[..], &["--out", &env.s("g1")]].concat());
    env.ok(&[&gen[..], &["--out", &env.s("g2")]].concat());
    let g1 = files(&env.path("g1"));
    assert_eq!(g1.len(), 6);
    assert_eq!(g1.iter().filter(|(p, _)| p.extension().unwrap() == "ppm").count(), 3);
    assert_eq!(g1, files(&env.path("g2")));
    let side: Value = serde_json::from_slice(&g1[0].1).unwrap();
    let ck: Value = serde_json::from_slice(&std::fs::read(env.path("ft/manifest.json")).unwrap()).unwrap();
    assert_eq!(side["config_hash"], ck["config_hash"]);

    env.ok(&[
        "evaluate",
        "--checkpoint",
        &env.s("ft"),
        "--task",
        "inv_edge",
        "--data",
        &env.s("data"),
        "--out",
        &env.s("eval.json"),
    ]);
    let ev: Value = serde_json::from_slice(&std::fs::read(env.path("eval.json")).unwrap()).unwrap();
    let per: Vec<f64> = ev["per_sample"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(per.len(), 4);
    assert_eq!(ev["n_samples"], 4);
    assert!((ev["mean"].as_f64().unwrap() - per.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    assert_eq!(ev["metric"], "ssim");

    let table = env.ok(&["params", "--checkpoint", &env.s("ft")]);
    assert!(table.contains("backbone_phi") && table.contains("yes"), "{table}");
    let pr: Value = serde_json::from_str(&env.ok(&["params", "--checkpoint", &env.s("ft"), "--json"])).unwrap();
    let sum: u64 = pr["partitions"].as_array().unwrap().iter().map(|r| r["params"].as_u64().unwrap()).sum();
    assert_eq!(sum, ck["total_params"].as_u64().unwrap());

    // A fine-tuned checkpoint does not hold parameters for an unseen task.
    let out = env.fsc(&[&gen[..4], &["blob", "--support-dir", &env.s("data"), "--out", &env.s("g3")]].concat());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
