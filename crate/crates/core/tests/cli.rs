//! End-to-end checks of the `gtr` binary on a tiny model.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gtr::cli::RunConfig;
use gtr::data::{load_annotations, GenConfig};
use gtr::model::{Checkpoint, ModelConfig};

fn gtr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gtr"))
        .args(args)
        .env_remove("GTR_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = gtr(args);
    assert!(out.status.success(), "gtr {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(data: &Path, epochs: usize) -> RunConfig {
    let model = ModelConfig::tiny();
    let mut cfg = RunConfig { seed: 5, deterministic: true, ..RunConfig::default() };
    cfg.generate = GenConfig {
        width: model.input_width,
        height: model.input_height,
        num_categories: model.num_categories,
        max_people: 3,
        head_radius: [8, 10],
        object_size: [14, 24],
        ..GenConfig::default()
    };
    cfg.model = model;
    cfg.data.dir = data.to_path_buf();
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 4;
    cfg.train.eval_every = 1;
    cfg
}

/// Writes a config and a 16-scene dataset generated from it.
fn setup(root: &Path, epochs: usize) -> (PathBuf, RunConfig) {
    let data = root.join("data");
    let cfg = tiny_config(&data, epochs);
    let path = root.join("run.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    if !data.exists() {
        ok(&["generate", "--config", s(&path), "--out", s(&data), "--count", "16", "--val-fraction", "0.25"]);
    }
    (path, cfg)
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["generate", "--out", s(&a), "--count", "6", "--seed", "11"]);
    ok(&["generate", "--out", s(&b), "--count", "6", "--seed", "11"]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() >= 7);
    assert_eq!(ta, tb);
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(gtr(&["generate", "--count", "3"]).status.code(), Some(2));
    assert_eq!(gtr(&["bogus"]).status.code(), Some(2));
    assert_eq!(gtr(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gtr(&["evaluate", "--checkpoint", "/nonexistent.ckpt", "--data", "/nonexistent", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "seed = 1\n[train]\nepochs = \"many\"\n").unwrap();
    let out = gtr(&["train", "--config", s(&bad), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));
}

#[test]
fn train_refuses_existing_run_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let (config, _) = setup(tmp.path(), 1);
    let run = tmp.path().join("run");
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join("keep.txt"), "x").unwrap();
    let out = gtr(&["train", "--config", s(&config), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(run.join("keep.txt").exists());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let (two, cfg) = setup(tmp.path(), 2);
    let straight = tmp.path().join("straight");
    ok(&["train", "--config", s(&two), "--out", s(&straight)]);

    let mut short = cfg.clone();
    short.train.epochs = 1;
    let one = tmp.path().join("one.toml");
    fs::write(&one, short.to_toml()).unwrap();
    let resumed = tmp.path().join("resumed");
    ok(&["train", "--config", s(&one), "--out", s(&resumed)]);
    ok(&["train", "--config", s(&two), "--out", s(&resumed), "--resume"]);

    for f in ["last.ckpt", "epochs.jsonl", "train_log.jsonl"] {
        assert_eq!(fs::read(straight.join(f)).unwrap(), fs::read(resumed.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn checkpoint_evaluate_and_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let (config, _) = setup(tmp.path(), 1);
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&config), "--out", s(&run)]);
    let ckpt = run.join("last.ckpt");

    // Save, load and save again reproduces the file.
    let ck = Checkpoint::load(&ckpt).unwrap();
    let copy = tmp.path().join("copy.ckpt");
    ck.save(&copy).unwrap();
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&copy).unwrap());

    let data = tmp.path().join("data");
    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    ok(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "val", "--out", s(&e1)]);
    ok(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "val", "--out", s(&e2)]);
    let report = fs::read_to_string(e1.join("report.txt")).unwrap();
    assert!(report.contains("hgf_map"));
    assert_eq!(tree(&e1), tree(&e2));

    let image = fs::read_dir(data.join("images")).unwrap().next().unwrap().unwrap().path();
    let inf = tmp.path().join("inf");
    ok(&["infer", "--checkpoint", s(&ckpt), "--image", s(&image), "--out", s(&inf), "--threshold", "0"]);
    assert!(inf.join("overlay.png").exists());
    let (entries, n_cat) = load_annotations(&inf.join("detections.json")).unwrap();
    assert_eq!(n_cat, 3);
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0].1.annotations.len(), 4);

    let none = tmp.path().join("none");
    ok(&["infer", "--checkpoint", s(&ckpt), "--image", s(&image), "--out", s(&none), "--threshold", "1.000001"]);
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(none.join("detections.json")).unwrap()).unwrap();
    assert_eq!(doc["annotations"].as_array().map(Vec::len), Some(0));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            let cfg = RunConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            cfg.model.validate().unwrap();
            n += 1;
        }
    }
    assert_eq!(n, 3);
}
