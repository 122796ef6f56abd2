//! Synthetic classification data with a planted high-magnitude subset.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use repsim_core::derive_seed;
use repsim_core::schedule::shuffled_indices;
use repsim_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ToyError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthDatasetConfig {
    /// Training examples.
    pub n_examples: usize,
    /// Held-out probe examples used for checkpoints and accuracy.
    pub n_probe: usize,
    pub input_dim: usize,
    pub n_classes: usize,
    /// Fraction of examples that receive the shared planted component.
    pub planted_fraction: f64,
    /// Per-coordinate scale of the planted component, in the same units as
    /// `noise_scale`: the planted vector has length
    /// `planted_magnitude · sqrt(input_dim)`.
    pub planted_magnitude: f64,
    /// Per-coordinate standard deviation of the isotropic noise.
    pub noise_scale: f64,
    /// Length of each class mean.
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        Self {
            n_examples: 3000,
            n_probe: 1000,
            input_dim: 32,
            n_classes: 10,
            planted_fraction: 0.05,
            planted_magnitude: 20.0,
            noise_scale: 1.0,
            class_separation: 3.0,
            seed: 0,
        }
    }
}

impl SynthDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ToyError::Config(m.to_string()));
        if self.n_examples == 0 || self.n_probe == 0 || self.input_dim == 0 {
            return bad("example counts and input_dim must be positive");
        }
        if self.n_classes < 2 {
            return bad("need at least 2 classes");
        }
        if !(self.planted_fraction > 0.0 && self.planted_fraction < 0.5) {
            return bad("planted_fraction must lie in (0, 0.5)");
        }
        if !(self.noise_scale > 0.0) {
            return bad("noise_scale must be positive");
        }
        if !(self.planted_magnitude >= 0.0) {
            return bad("planted_magnitude must be nonnegative");
        }
        if !(self.class_separation >= 0.0) {
            return bad("class_separation must be nonnegative");
        }
        Ok(())
    }
}

/// Inputs, labels and ground-truth planted indices for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub planted: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_ids(&self, prefix: &str) -> Vec<String> {
        (0..self.len()).map(|i| format!("{prefix}{i:05}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: Split,
    pub probe: Split,
    pub class_means: Matrix,
    pub planted_direction: Vec<f64>,
    pub config: SynthDatasetConfig,
}

/// Draws class means and the planted direction once, then both splits.
///
/// Every example is `class_mean + noise`; the planted subset (`⌈f·n⌉`
/// examples, assigned to classes round-robin) also gets
/// `planted_magnitude · sqrt(input_dim) · direction`.
pub fn make_synth_dataset(cfg: &SynthDatasetConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "synth-structure"));
    let d = cfg.input_dim;
    let mut class_means = Matrix::from_fn(cfg.n_classes, d, |_, _| rng.sample(StandardNormal));
    for mut row in class_means.row_iter_mut() {
        let n = row.norm();
        row *= cfg.class_separation / n;
    }
    let planted_direction = unit_gaussian(d, &mut rng);

    let mut train_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "synth-train"));
    let mut probe_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "synth-probe"));
    let train = make_split(cfg, cfg.n_examples, &class_means, &planted_direction, &mut train_rng);
    let probe = make_split(cfg, cfg.n_probe, &class_means, &planted_direction, &mut probe_rng);
    Ok(SynthDataset {
        train,
        probe,
        class_means,
        planted_direction,
        config: cfg.clone(),
    })
}

fn unit_gaussian(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn make_split(
    cfg: &SynthDatasetConfig,
    n: usize,
    class_means: &Matrix,
    direction: &[f64],
    rng: &mut ChaCha8Rng,
) -> Split {
    let c = cfg.n_classes;
    // balanced labels in shuffled order
    let order = shuffled_indices(n, rng);
    let mut labels = vec![0; n];
    for (slot, &i) in order.iter().enumerate() {
        labels[i] = slot % c;
    }
    let count = repsim_core::blocks::fraction_count(cfg.planted_fraction, n);
    // first `count` examples of the shuffled order cycle through the classes
    let mut planted: Vec<usize> = order[..count].to_vec();
    planted.sort_unstable();
    let mut is_planted = vec![false; n];
    for &i in &planted {
        is_planted[i] = true;
    }

    let d = cfg.input_dim;
    let scale = cfg.planted_magnitude * (d as f64).sqrt();
    let mut inputs = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            let mut v = class_means[(labels[i], j)] + cfg.noise_scale * noise;
            if is_planted[i] {
                v += scale * direction[j];
            }
            inputs[(i, j)] = v;
        }
    }
    Split {
        inputs,
        labels,
        planted,
    }
}
