#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_subadj"));
    c.env_remove("SUBADJ_OUT_DIR");
    c
}

/// Runs the binary in `dir`, panicking with its stderr on a non-zero exit.
pub fn run_ok(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "subadj {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn run_code(dir: &Path, args: &[&str]) -> i32 {
    bin().current_dir(dir).args(args).output().unwrap().status.code().unwrap()
}

pub const MICRO_SPEC: &str = "train_length = 600\nlength = 600\n";

pub const MICRO_RUN: &str = r#"data.train = "data/train.csv"
data.test = "data/test.csv"
model.d_model = 8
model.n_layers = 1
model.n_heads = 2
model.d_ff = 16
model.win_size = 20
span.k1 = 2
span.k2 = 4
train.batch_size = 4
train.lr = 1e-3
train.max_epochs = 2
"#;

/// A directory holding `spec.toml`, `run.toml` and generated `data/`.
pub fn micro_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.toml"), MICRO_SPEC).unwrap();
    fs::write(dir.path().join("run.toml"), MICRO_RUN).unwrap();
    run_ok(dir.path(), &["generate", "--spec", "spec.toml", "--out", "data"]);
    dir
}

/// Every file under `root`, relative path to bytes, sorted.
pub fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

/// Columns of a headed CSV by name.
pub fn read_columns(path: &Path) -> Vec<(String, Vec<String>)> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    let mut cols: Vec<(String, Vec<String>)> = header.into_iter().map(|h| (h, Vec::new())).collect();
    for line in lines {
        for (c, v) in cols.iter_mut().zip(line.split(',')) {
            c.1.push(v.to_string());
        }
    }
    cols
}

pub fn column_f64(cols: &[(String, Vec<String>)], name: &str) -> Vec<f64> {
    cols.iter()
        .find(|c| c.0 == name)
        .unwrap_or_else(|| panic!("no column {name}"))
        .1
        .iter()
        .map(|v| v.parse().unwrap())
        .collect()
}

/// Best F1 over all thresholds with optional segment-wise adjustment,
/// computed without the library.
pub fn brute_best_f1(scores: &[f64], truth: &[bool], adjust: bool) -> f64 {
    let mut ths = scores.to_vec();
    ths.sort_by(|a, b| b.total_cmp(a));
    ths.dedup();
    let mut best = 0.0f64;
    for th in ths {
        let mut pred: Vec<bool> = scores.iter().map(|&s| s >= th).collect();
        if adjust {
            let mut i = 0;
            while i < truth.len() {
                if !truth[i] {
                    i += 1;
                    continue;
                }
                let mut j = i;
                while j < truth.len() && truth[j] {
                    j += 1;
                }
                if pred[i..j].iter().any(|&p| p) {
                    pred[i..j].iter_mut().for_each(|p| *p = true);
                }
                i = j;
            }
        }
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        best = best.max(2.0 * tp / (2.0 * tp + fp + fn_));
    }
    best
}
