//! Training loop with optional first-PC regularization and probe-set
//! checkpoints.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repsim_core::matrix::select_rows;
use repsim_core::schedule::shuffled_indices;
use repsim_core::spectral::frac_first;
use repsim_core::{
    center_columns, derive_seed, principal_components, ActivationArchive, ActivationTensor, Error,
    Matrix, PowerIterState,
};
use serde::{Deserialize, Serialize};

use crate::data::SynthDataset;
use crate::error::{Result, ToyError};
use crate::net::{accuracy, softmax_cross_entropy, Mlp, Sgd, ToyNetConfig};
use crate::reg::{pc_reg_step, RegConfig};

/// Power-iteration estimate next to the exact top eigenvalue of the same
/// batch covariance, sampled on the last step of an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaCheck {
    pub layer: usize,
    pub step: usize,
    pub estimate: f64,
    pub exact: f64,
}

impl LambdaCheck {
    pub fn relative_error(&self) -> f64 {
        (self.estimate - self.exact).abs() / self.exact
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch's batches (full training
    /// set at initialization).
    pub loss: f64,
    /// Mean regularization penalty over the epoch's batches.
    pub reg_loss: f64,
    /// Probe-set accuracy after the epoch.
    pub accuracy: f64,
    /// First-PC variance fraction of each hidden layer on the probe set.
    pub frac_first: Vec<f64>,
    pub lambda_checks: Vec<LambdaCheck>,
    /// Checkpoint name when activations were archived at this epoch.
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainingTrace {
    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("trace always holds the initial record")
    }

    /// One JSON object per line, one line per epoch.
    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub name: String,
    pub archive: ActivationArchive,
}

pub struct TrainingRun {
    pub trace: TrainingTrace,
    /// Requested checkpoints in epoch order; the final epoch is always last.
    pub checkpoints: Vec<Checkpoint>,
    pub net: Mlp,
    pub regularized_layers: Vec<usize>,
}

impl TrainingRun {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints.last().expect("final checkpoint")
    }

    pub fn checkpoint_at(&self, epoch: usize) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.epoch == epoch)
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}")
}

pub fn hidden_layer_id(l: usize) -> String {
    format!("h{:02}", l + 1)
}

/// Hidden activations of `inputs` as an archive (one rank-2 layer per
/// hidden layer).
pub fn activation_archive(
    net: &Mlp,
    inputs: &Matrix,
    example_ids: Vec<String>,
    metadata: BTreeMap<String, String>,
) -> Result<ActivationArchive> {
    let fwd = net.forward(inputs);
    let layers = fwd
        .hidden
        .iter()
        .enumerate()
        .map(|(l, h)| ActivationTensor::from_matrix(hidden_layer_id(l), h))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(ActivationArchive::new(layers, Some(example_ids), metadata)?)
}

/// First-PC fraction of every layer, computed from the `f32` archive
/// payload so it can be recomputed from saved checkpoints.
pub fn archive_frac_first(archive: &ActivationArchive) -> Vec<f64> {
    archive
        .layers()
        .iter()
        .map(|t| frac_first(&center_columns(&t.to_matrix())).unwrap_or(0.0))
        .collect()
}

/// Trains the MLP with momentum SGD on softmax cross-entropy, plus the
/// summed per-layer first-PC penalty when `reg` is given.
///
/// Epoch 0 is the initialization record. Checkpoints are archived on the
/// held-out probe split at each requested epoch and at the final epoch.
pub fn train(
    cfg: &ToyNetConfig,
    data: &SynthDataset,
    reg: Option<&RegConfig>,
    checkpoint_epochs: &[usize],
) -> Result<TrainingRun> {
    cfg.validate()?;
    if let Some(r) = reg {
        r.validate(cfg.depth)?;
    }
    let train = &data.train;
    let probe = &data.probe;
    let input_dim = train.inputs.ncols();
    let mut net = Mlp::new(input_dim, data.config.n_classes, cfg);
    let mut sgd = Sgd::new(&net, cfg);
    let reg_layers = reg.map(|r| r.layers(cfg.depth)).unwrap_or_default();

    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train-order"));
    let mut pi_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "power-iteration"));
    let mut states: Vec<PowerIterState> = reg_layers
        .iter()
        .map(|_| PowerIterState::random(cfg.width, &mut pi_rng))
        .collect();

    let probe_ids = probe.example_ids("probe_");
    let metadata = |epoch: usize| {
        let mut m = BTreeMap::new();
        m.insert("model".to_string(), "toy-mlp".to_string());
        m.insert("epoch".to_string(), epoch.to_string());
        m.insert("seed".to_string(), cfg.seed.to_string());
        m.insert("regularized".to_string(), reg.is_some().to_string());
        m
    };

    let mut trace = TrainingTrace::default();
    let mut checkpoints = Vec::new();
    let mut record_epoch = |net: &Mlp,
                            epoch: usize,
                            loss: f64,
                            reg_loss: f64,
                            lambda_checks: Vec<LambdaCheck>,
                            trace: &mut TrainingTrace|
     -> Result<()> {
        let archive = activation_archive(net, &probe.inputs, probe_ids.clone(), metadata(epoch))?;
        let acc = accuracy(&net.forward(&probe.inputs).logits, &probe.labels);
        let fracs = archive_frac_first(&archive);
        let want = checkpoint_epochs.contains(&epoch) || epoch == cfg.epochs;
        let checkpoint = want.then(|| checkpoint_name(epoch));
        if let Some(name) = &checkpoint {
            checkpoints.push(Checkpoint {
                epoch,
                name: name.clone(),
                archive,
            });
        }
        trace.records.push(EpochRecord {
            epoch,
            loss,
            reg_loss,
            accuracy: acc,
            frac_first: fracs,
            lambda_checks,
            checkpoint,
        });
        Ok(())
    };

    let init_loss = softmax_cross_entropy(&net.forward(&train.inputs).logits, &train.labels).0;
    record_epoch(&net, 0, init_loss, 0.0, Vec::new(), &mut trace)?;

    // a trailing partial batch counts only when it is trained on
    let steps_per_epoch =
        train.len() / cfg.batch_size + usize::from(train.len() % cfg.batch_size >= 4);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let order = shuffled_indices(train.len(), &mut order_rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).filter(|b| b.len() >= 4).collect();
        let mut loss_sum = 0.0;
        let mut reg_sum = 0.0;
        let mut lambda_checks = Vec::new();
        for (bi, batch) in batches.iter().enumerate() {
            let x = select_rows(&train.inputs, batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let fwd = net.forward(&x);
            let (ce, d_logits) = softmax_cross_entropy(&fwd.logits, &y);

            let mut extra: Vec<Option<Matrix>> = vec![None; cfg.depth];
            let mut reg_loss = 0.0;
            if let Some(r) = reg {
                let last_batch = bi + 1 == batches.len();
                for (slot, &l) in reg_layers.iter().enumerate() {
                    let xc = center_columns(&fwd.hidden[l]);
                    match pc_reg_step(&xc, &states[slot].u, r.alpha, r.delta) {
                        Ok(s) => {
                            if last_batch {
                                let exact = principal_components(&xc, 1)
                                    .map(|p| p.eigenvalues[0])
                                    .unwrap_or(0.0);
                                lambda_checks.push(LambdaCheck {
                                    layer: l,
                                    step,
                                    estimate: s.lambda,
                                    exact,
                                });
                            }
                            reg_loss += s.loss;
                            // chain rule through the column centering
                            extra[l] = Some(center_columns(&s.grad));
                            states[slot] = PowerIterState {
                                u: s.next_u,
                                lambda: s.lambda,
                            };
                        }
                        Err(ToyError::Analysis(Error::PowerIterationRestart)) => {
                            states[slot] = PowerIterState::random(cfg.width, &mut pi_rng);
                        }
                        // a dead layer has nothing to penalize
                        Err(ToyError::Analysis(Error::Degenerate(_))) => {}
                        Err(e) => return Err(e),
                    }
                }
            }

            let total = ce + reg_loss;
            if !total.is_finite() {
                return Err(ToyError::Divergence {
                    epoch,
                    step,
                    loss: total,
                });
            }
            sgd.set_lr(cfg.lr_schedule.rate(cfg.learning_rate, step, total_steps));
            let mut grads = net.backward(&x, &fwd, &d_logits, &extra);
            if let Some(c) = cfg.grad_clip {
                grads.clip_norm(c);
            }
            sgd.step(&mut net, &grads);
            loss_sum += ce;
            reg_sum += reg_loss;
            step += 1;
        }
        let nb = batches.len().max(1) as f64;
        record_epoch(&net, epoch, loss_sum / nb, reg_sum / nb, lambda_checks, &mut trace)?;
    }

    Ok(TrainingRun {
        trace,
        checkpoints,
        net,
        regularized_layers: reg_layers,
    })
}
