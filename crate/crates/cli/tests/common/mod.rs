#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

/// A model small enough for the whole chain to run in about a second.
pub const SMALL: &str = "\
# tiny model, one epoch per stage
data.train_episodes = 64
data.test_episodes = 32
backbone.layers = 3
backbone.width = 16
backbone.heads = 2
backbone.capsule_dim = 8
backbone.head_hidden = 16
graph.affinity_dim = 4
teacher.epochs = 1
teacher.warmup = 1
stage1.epochs = 1
stage1.warmup = 1
train.epochs = 1
train.warmup = 1
";

/// Every subcommand in dependency order, with the extra arguments used here.
pub const CHAIN: &[&[&str]] = &[
    &["gen-data"],
    &["train-teacher"],
    &["stage1"],
    &["stage2"],
    &["eval"],
    &["sweep-tau"],
    &["sweep-skip"],
    &["activation-hist"],
    &["gradcheck", "--instances", "2"],
    &["ablate", "--kind", "encoder"],
    &["ablate", "--kind", "losses"],
    &["ablate", "--kind", "k", "--values", "2,4"],
    &["ablate", "--kind", "ratio"],
];

pub fn write_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("small.cfg");
    fs::write(&p, SMALL).unwrap();
    p
}

/// Runs the binary with `--config` and `--out` pointing into `dir`.
pub fn run(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("small.cfg");
    if !cfg.exists() {
        write_config(dir);
    }
    Command::new(env!("CARGO_BIN_EXE_gatedistill"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

pub fn run_ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Contents of every CSV in `dir/out`, keyed by file name.
pub fn csvs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir.join("out"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}
