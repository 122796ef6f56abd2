//! `train-toy` and `evolution`.

use std::path::Path;

use anyhow::Context;
use repsim_core::{derive_seed, ActivationArchive, DominancePolicy, ScheduleParams};
use repsim_toy::{
    evolution_report, make_synth_dataset, train, RegConfig, SynthDatasetConfig, ToyNetConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{kernel_spec, resolve_batch, write_heatmap};
use crate::args::{EvolutionArgs, Switch, TrainToyArgs};
use crate::error::CliError;
use crate::manifest::Run;

pub const RUN_INDEX: &str = "run.json";

/// Contents of a `train-toy` configuration file. Every section is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyRunConfig {
    pub dataset: SynthDatasetConfig,
    pub net: ToyNetConfig,
    /// Present when the first-PC penalty is applied.
    pub reg: Option<RegConfig>,
    pub checkpoint_epochs: Vec<usize>,
}

impl Default for ToyRunConfig {
    fn default() -> Self {
        Self {
            dataset: SynthDatasetConfig::default(),
            net: ToyNetConfig::default(),
            reg: None,
            checkpoint_epochs: vec![1, 5, 20],
        }
    }
}

impl ToyRunConfig {
    pub fn parse(text: &str, path: &Path) -> anyhow::Result<Self> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let parsed = match ext {
            "toml" => toml::from_str(text).map_err(|e| e.to_string()),
            "json" => serde_json::from_str(text).map_err(|e| e.to_string()),
            _ => serde_json::from_str(text)
                .or_else(|_| toml::from_str(text))
                .map_err(|e: toml::de::Error| e.to_string()),
        };
        parsed.map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())).into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub epoch: usize,
    pub name: String,
    pub file: String,
}

/// Index of a run directory; the last checkpoint is the final model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunIndex {
    pub checkpoints: Vec<CheckpointEntry>,
    pub regularized_layers: Vec<usize>,
    pub final_accuracy: f64,
    pub final_frac_first: Vec<f64>,
}

const DATA_STREAMS: [&str; 3] = ["synth-structure", "synth-train", "synth-probe"];
const NET_STREAMS: [&str; 3] = ["init", "train-order", "power-iteration"];

pub fn train_toy(a: TrainToyArgs) -> anyhow::Result<()> {
    let mut run = Run::new("train-toy", &a, &a.out.out)?;
    let mut cfg = match &a.config {
        Some(p) => {
            let bytes = run.read_input(p)?;
            let text = String::from_utf8(bytes)
                .map_err(|_| CliError::Usage(format!("config {} is not UTF-8", p.display())))?;
            ToyRunConfig::parse(&text, p)?
        }
        None => ToyRunConfig::default(),
    };
    match a.reg {
        Some(Switch::On) => cfg.reg = Some(cfg.reg.unwrap_or_default()),
        Some(Switch::Off) => cfg.reg = None,
        None => {}
    }
    if let Some(e) = &a.checkpoint_epochs {
        cfg.checkpoint_epochs = e.clone();
    }
    if let Some(s) = a.seed {
        cfg.dataset.seed = s;
        cfg.net.seed = s;
    }
    run.seed("dataset", cfg.dataset.seed);
    run.seed("net", cfg.net.seed);
    for tag in DATA_STREAMS {
        run.seed(&format!("dataset/{tag}"), derive_seed(cfg.dataset.seed, tag));
    }
    for tag in NET_STREAMS {
        run.seed(&format!("net/{tag}"), derive_seed(cfg.net.seed, tag));
    }

    let data = make_synth_dataset(&cfg.dataset)?;
    let result = train(&cfg.net, &data, cfg.reg.as_ref(), &cfg.checkpoint_epochs)?;

    run.write_json("config.json", &cfg)?;
    run.write("trace.jsonl", result.trace.to_json_lines().as_bytes())?;
    let mut entries = Vec::new();
    for c in &result.checkpoints {
        let file = format!("checkpoints/{}.actv", c.name);
        run.write(&file, &c.archive.to_bytes()?)?;
        entries.push(CheckpointEntry {
            epoch: c.epoch,
            name: c.name.clone(),
            file,
        });
    }
    let probe_ids = data.probe.example_ids("probe_");
    run.write_json(
        "planted.json",
        &json!({
            "probe_planted_ids": data.probe.planted.iter().map(|&i| &probe_ids[i]).collect::<Vec<_>>(),
            "probe_planted_indices": data.probe.planted,
            "train_planted_indices": data.train.planted,
            "planted_direction": data.planted_direction,
        }),
    )?;
    let last = result.trace.last();
    run.write_json(
        RUN_INDEX,
        &RunIndex {
            checkpoints: entries,
            regularized_layers: result.regularized_layers.clone(),
            final_accuracy: last.accuracy,
            final_frac_first: last.frac_first.clone(),
        },
    )?;
    run.finish()?;
    Ok(())
}

fn read_index(run: &mut Run, dir: &Path) -> anyhow::Result<RunIndex> {
    let path = dir.join(RUN_INDEX);
    let bytes = run.read_input(&path)?;
    let index: RunIndex = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Data(format!("{} is not a run index: {e}", path.display())))?;
    if index.checkpoints.is_empty() {
        return Err(CliError::Data(format!("{} lists no checkpoints", path.display())).into());
    }
    Ok(index)
}

fn read_checkpoint(run: &mut Run, dir: &Path, entry: &CheckpointEntry) -> anyhow::Result<ActivationArchive> {
    let path = dir.join(&entry.file);
    let bytes = run.read_input(&path)?;
    ActivationArchive::from_bytes(&bytes)
        .with_context(|| format!("corrupt checkpoint {}", path.display()))
}

pub fn evolution(a: EvolutionArgs) -> anyhow::Result<()> {
    let mut run = Run::new("evolution", &a, &a.out.out)?;
    let index = read_index(&mut run, &a.run_dir)?;
    let mut archives = Vec::with_capacity(index.checkpoints.len());
    for entry in &index.checkpoints {
        archives.push((entry.name.clone(), read_checkpoint(&mut run, &a.run_dir, entry)?));
    }
    let (final_name, final_archive) = archives.pop().expect("index is nonempty");
    let spec = kernel_spec(&a.cka)?;
    let params = ScheduleParams {
        batch_size: resolve_batch(&a.cka, final_archive.n()),
        epochs: a.cka.epochs,
        seed: a.cka.seed,
    };
    run.seed("schedule", a.cka.seed);
    let policy = DominancePolicy::TopFraction(a.top_fraction);
    let report = evolution_report(&archives, &final_archive, &spec, params, policy)?;

    for c in &report.checkpoints {
        write_heatmap(&mut run, &format!("within/{}", c.name), &c.within)?;
        write_heatmap(&mut run, &format!("cross/{}", c.name), &c.cross_to_final)?;
    }
    write_heatmap(&mut run, &format!("within/{final_name}"), &report.final_within)?;
    run.write("overlap.csv", report.overlap_csv().as_bytes())?;

    let block_means = report.block_cross_means();
    let checkpoints: Vec<_> = report
        .checkpoints
        .iter()
        .enumerate()
        .map(|(i, c)| {
            json!({
                "name": c.name,
                "within_blocks": c.within_blocks,
                "cross_diagonal": c.cross_to_final.diagonal(),
                "block_cross_mean": block_means.as_ref().map(|m| m[i]),
                "dominant_ids": c.dominant.selected_ids(),
                "overlap_with_final": c.overlap_with_final,
                "tracked_magnitudes": c.tracked_magnitudes,
            })
        })
        .collect();
    run.write_json(
        "evolution.json",
        &json!({
            "final": final_name,
            "reference_layer": report.reference_layer,
            "final_block": report.final_block,
            "final_dominant_ids": report.final_dominant.selected_ids(),
            "checkpoints": checkpoints,
        }),
    )?;
    run.finish()?;
    Ok(())
}
