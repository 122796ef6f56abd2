#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use repsim_core::{save_archive, ActivationArchive, ActivationTensor, Matrix};

pub const SMALL_CONFIG: &str = "checkpoint_epochs = [1, 2]

[dataset]
n_examples = 400
n_probe = 200

[net]
depth = 6
width = 16
epochs = 3
";

pub fn repsim(args: &[&str]) -> Output {
    repsim_env(args, &[])
}

pub fn repsim_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_repsim"));
    cmd.args(args).env("RUST_LOG", "error");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn repsim")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

pub fn gaussian(n: usize, p: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
}

pub fn write_archive(path: &Path, layers: &[(&str, Matrix)]) {
    let tensors = layers
        .iter()
        .map(|(id, m)| ActivationTensor::from_matrix(*id, m).unwrap())
        .collect();
    save_archive(&ActivationArchive::new(tensors, None, BTreeMap::new()).unwrap(), path).unwrap();
}

/// Rank-4 archive of `n` random 4x5x3 images.
pub fn write_images(path: &Path, n: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<f32> = (0..n * 4 * 5 * 3).map(|_| rng.gen()).collect();
    let t = ActivationTensor::new("images", vec![n, 4, 5, 3], data).unwrap();
    save_archive(&ActivationArchive::new(vec![t], None, BTreeMap::new()).unwrap(), path).unwrap();
}

/// Trains the small toy config into `dir/run` once and returns that path.
pub fn small_run(dir: &Path) -> PathBuf {
    let cfg = dir.join("small.toml");
    fs::write(&cfg, SMALL_CONFIG).unwrap();
    let run = dir.join("run");
    let o = repsim(&["train-toy", "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    run
}

/// Every file under `root` with its bytes, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
