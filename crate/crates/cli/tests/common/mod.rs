#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_roiformer"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small model over 6 ROIs and 30-frame segments with every mechanism on.
pub const TINY_MODEL: &str = r#"
[model]
seq_len = 30
n_rois = 6
d_model = 8
d_a = 8
d_ff = 16
heads_encoder = 2
heads_decoder = 2
blocks_encoder = 1
blocks_decoder = 2
cnn_channels = [4, 4, 8, 8]
cnn_kernel = 3
classifier_sizes = [8, 4, 1]

[model.window]
back = 3
fwd = 3
blocks = [0]

[model.rank]
k = 3
applied = true
"#;

pub fn tiny_train(epochs: usize) -> String {
    format!(
        "[train]\nepochs = {epochs}\nbatch_size = 8\nlearning_rate = 0.001\nsegment_length = 30\nseed = 3\n"
    )
}

/// Writes a synthetic dataset with `n` subjects to `dir/data`.
pub fn synth_data(dir: &Path, n: usize, n_rois: usize) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "synth",
        "--out",
        p(&data),
        "--n-subjects",
        &n.to_string(),
        "--t-full",
        "40",
        "--n-rois",
        &n_rois.to_string(),
        "--seed",
        "5",
    ]);
    data
}

/// Config file at `dir/name` pointing at `data` with outputs under `dir/out_name`.
pub fn write_config(dir: &Path, name: &str, body: &str, data: &Path, out_name: &str) -> PathBuf {
    let text = format!(
        "{body}\n[data]\nseries_dir = \"{}\"\nphenotypic = \"{}\"\nout_dir = \"{}\"\n",
        p(&data.join("series")),
        p(&data.join("phenotypic.tsv")),
        p(&dir.join(out_name)),
    );
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

pub fn read_matrix(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split('\t').map(|v| v.parse().unwrap()).collect())
        .collect()
}

pub fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}
