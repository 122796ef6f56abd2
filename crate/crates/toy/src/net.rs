//! Fully-connected ReLU network with hand-written backpropagation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use repsim_core::{derive_seed, Matrix, Vector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ToyError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `learning_rate` to zero over all steps.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, total_steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step as f64 / total_steps.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyNetConfig {
    /// Number of hidden layers.
    pub depth: usize,
    /// Units per hidden layer.
    pub width: usize,
    pub activation: Activation,
    pub seed: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    /// Global gradient-norm clipping threshold.
    pub grad_clip: Option<f64>,
    /// Start the readout layer at zero.
    pub zero_readout: bool,
}

impl Default for ToyNetConfig {
    fn default() -> Self {
        Self {
            depth: 12,
            width: 64,
            activation: Activation::Relu,
            seed: 0,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 40,
            batch_size: 64,
            weight_decay: 5e-4,
            lr_schedule: LrSchedule::Cosine,
            grad_clip: Some(1.0),
            zero_readout: true,
        }
    }
}

impl ToyNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ToyError::Config(m.to_string()));
        if self.depth < 2 {
            return bad("depth must be at least 2");
        }
        if self.width < 2 {
            return bad("width must be at least 2");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return bad("momentum must lie in (0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative");
        }
        if self.batch_size < 4 {
            return bad("batch_size must be at least 4");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }
}

/// Weights are stored `in x out` so a batch forward pass is `H W + 1bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

/// Pre- and post-activation values of every hidden layer for one batch.
#[derive(Debug, Clone)]
pub struct Forward {
    pub pre: Vec<Matrix>,
    pub hidden: Vec<Matrix>,
    pub logits: Matrix,
}

pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

impl Gradients {
    /// Euclidean norm over every weight and bias entry.
    pub fn norm(&self) -> f64 {
        let w: f64 = self.weights.iter().map(|g| g.norm_squared()).sum();
        let b: f64 = self.biases.iter().map(|g| g.norm_squared()).sum();
        (w + b).sqrt()
    }

    /// Rescales to norm `max_norm` when the norm exceeds it.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm {
            let s = max_norm / n;
            self.weights.iter_mut().for_each(|g| *g *= s);
            self.biases.iter_mut().for_each(|g| *g *= s);
        }
    }
}

impl Mlp {
    /// He-normal weights, zero biases.
    pub fn new(input_dim: usize, n_classes: usize, cfg: &ToyNetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
        let mut sizes = vec![input_dim];
        sizes.extend(std::iter::repeat_n(cfg.width, cfg.depth));
        sizes.push(n_classes);
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            weights.push(Matrix::from_fn(fan_in, fan_out, |_, _| {
                std * rng.sample::<f64, _>(StandardNormal)
            }));
            biases.push(Vector::zeros(fan_out));
        }
        if cfg.zero_readout {
            weights[cfg.depth].fill(0.0);
        }
        Self { weights, biases }
    }

    pub fn depth(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn forward(&self, x: &Matrix) -> Forward {
        let depth = self.depth();
        let mut pre = Vec::with_capacity(depth);
        let mut hidden: Vec<Matrix> = Vec::with_capacity(depth);
        for l in 0..depth {
            let input = if l == 0 { x } else { &hidden[l - 1] };
            let z = affine(input, &self.weights[l], &self.biases[l]);
            hidden.push(z.map(|v| v.max(0.0)));
            pre.push(z);
        }
        let last = hidden.last().unwrap_or(x);
        let logits = affine(last, &self.weights[depth], &self.biases[depth]);
        Forward {
            pre,
            hidden,
            logits,
        }
    }

    /// Backpropagates `d_logits` plus any extra gradients injected at the
    /// hidden activations (`extra[l]` is added to `∂L/∂H_l`).
    pub fn backward(&self, x: &Matrix, fwd: &Forward, d_logits: &Matrix, extra: &[Option<Matrix>]) -> Gradients {
        let depth = self.depth();
        let mut gw = vec![Matrix::zeros(0, 0); depth + 1];
        let mut gb = vec![Vector::zeros(0); depth + 1];

        let last_hidden = &fwd.hidden[depth - 1];
        gw[depth] = last_hidden.tr_mul(d_logits);
        gb[depth] = column_sums(d_logits);
        let mut d_hidden = d_logits * self.weights[depth].transpose();

        for l in (0..depth).rev() {
            if let Some(Some(e)) = extra.get(l) {
                d_hidden += e;
            }
            let mut dz = d_hidden;
            dz.zip_apply(&fwd.pre[l], |g, z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            let input = if l == 0 { x } else { &fwd.hidden[l - 1] };
            gw[l] = input.tr_mul(&dz);
            gb[l] = column_sums(&dz);
            d_hidden = if l > 0 {
                &dz * self.weights[l].transpose()
            } else {
                Matrix::zeros(0, 0)
            };
        }
        Gradients {
            weights: gw,
            biases: gb,
        }
    }
}

fn affine(h: &Matrix, w: &Matrix, b: &Vector) -> Matrix {
    let mut z = h * w;
    for mut row in z.row_iter_mut() {
        for (v, bias) in row.iter_mut().zip(b.iter()) {
            *v += bias;
        }
    }
    z
}

fn column_sums(m: &Matrix) -> Vector {
    Vector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let (b, _) = logits.shape();
    let mut grad = Matrix::zeros(logits.nrows(), logits.ncols());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.max();
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_denom = denom.ln() + max;
        loss += log_denom - row[y];
        for (j, v) in row.iter().enumerate() {
            grad[(i, j)] = (v - log_denom).exp() / b as f64;
        }
        grad[(i, y)] -= 1.0 / b as f64;
    }
    (loss / b as f64, grad)
}

pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| logits.row(i).transpose().argmax().0 == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// Momentum SGD state (`v ← μv + g + wd·W`, `W ← W − lr·v`); weight decay
/// applies to weights only.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    vel_w: Vec<Matrix>,
    vel_b: Vec<Vector>,
}

impl Sgd {
    pub fn new(net: &Mlp, cfg: &ToyNetConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            vel_w: net.weights.iter().map(|w| w.map(|_| 0.0)).collect(),
            vel_b: net.biases.iter().map(|b| b.map(|_| 0.0)).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        for l in 0..net.weights.len() {
            let g = &grads.weights[l] + &net.weights[l] * self.weight_decay;
            self.vel_w[l] = &self.vel_w[l] * self.momentum + g;
            net.weights[l] -= &self.vel_w[l] * self.lr;
            self.vel_b[l] = &self.vel_b[l] * self.momentum + &grads.biases[l];
            net.biases[l] -= &self.vel_b[l] * self.lr;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Mlp, Matrix, Vec<usize>) {
        let cfg = ToyNetConfig {
            depth: 3,
            width: 5,
            seed: 4,
            zero_readout: false,
            ..Default::default()
        };
        let net = Mlp::new(4, 3, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0));
        (net, x, vec![0, 1, 2, 0, 1, 2])
    }

    fn loss_of(net: &Mlp, x: &Matrix, y: &[usize]) -> f64 {
        softmax_cross_entropy(&net.forward(x).logits, y).0
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let (net, x, y) = small();
        let fwd = net.forward(&x);
        let (_, dl) = softmax_cross_entropy(&fwd.logits, &y);
        let g = net.backward(&x, &fwd, &dl, &[]);
        let h = 1e-6;
        for l in 0..net.weights.len() {
            for idx in [(0, 0), (1, 2), (3, 1)] {
                if idx.0 >= net.weights[l].nrows() || idx.1 >= net.weights[l].ncols() {
                    continue;
                }
                let mut plus = net.clone();
                plus.weights[l][idx] += h;
                let mut minus = net.clone();
                minus.weights[l][idx] -= h;
                let fd = (loss_of(&plus, &x, &y) - loss_of(&minus, &x, &y)) / (2.0 * h);
                let an = g.weights[l][idx];
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "layer {l} {idx:?}: {fd} vs {an}");
            }
            let mut plus = net.clone();
            plus.biases[l][0] += h;
            let mut minus = net.clone();
            minus.biases[l][0] -= h;
            let fd = (loss_of(&plus, &x, &y) - loss_of(&minus, &x, &y)) / (2.0 * h);
            assert!((fd - g.biases[l][0]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn injected_hidden_gradient_is_propagated() {
        // loss = <C, H_1> so the injected gradient is C itself
        let (net, x, _) = small();
        let fwd = net.forward(&x);
        let c = Matrix::from_fn(6, 5, |i, j| ((i * 5 + j) % 7) as f64 - 3.0);
        let zero_logits = Matrix::zeros(6, 3);
        let extra = vec![None, Some(c.clone()), None];
        let g = net.backward(&x, &fwd, &zero_logits, &extra);
        let h = 1e-6;
        let f = |n: &Mlp| n.forward(&x).hidden[1].component_mul(&c).sum();
        let mut plus = net.clone();
        plus.weights[0][(2, 3)] += h;
        let mut minus = net.clone();
        minus.weights[0][(2, 3)] -= h;
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        assert!((fd - g.weights[0][(2, 3)]).abs() < 1e-6 * (1.0 + fd.abs()));
        // layers above H_1 do not influence it
        assert_eq!(g.weights[2], Matrix::zeros(5, 5));
        assert_eq!(g.weights[3], Matrix::zeros(5, 3));
    }

    #[test]
    fn zero_readout_starts_at_zero() {
        let cfg = ToyNetConfig { depth: 2, width: 3, ..Default::default() };
        let net = Mlp::new(4, 2, &cfg);
        assert_eq!(net.weights[2], Matrix::zeros(3, 2));
        assert_ne!(net.weights[1], Matrix::zeros(3, 3));
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let (net, x, y) = small();
        let fwd = net.forward(&x);
        let (_, dl) = softmax_cross_entropy(&fwd.logits, &y);
        let mut g = net.backward(&x, &fwd, &dl, &[]);
        let before = g.norm();
        g.clip_norm(before / 2.0);
        assert!((g.norm() - before / 2.0).abs() < 1e-12);
        g.clip_norm(10.0 * before);
        assert!((g.norm() - before / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine;
        assert_eq!(s.rate(0.1, 0, 100), 0.1);
        assert!((s.rate(0.1, 50, 100) - 0.05).abs() < 1e-15);
        assert!(s.rate(0.1, 100, 100).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.rate(0.1, 70, 100), 0.1);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let (loss, grad) = softmax_cross_entropy(&Matrix::zeros(2, 4), &[0, 3]);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((grad.sum()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(ToyNetConfig { depth: 1, ..Default::default() }.validate().is_err());
        assert!(ToyNetConfig { width: 1, ..Default::default() }.validate().is_err());
        assert!(ToyNetConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(ToyNetConfig::default().validate().is_ok());
    }
}
