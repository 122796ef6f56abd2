use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "repsim", version, about = "Representational-similarity analysis of layer activations", propagate_version = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Layer-by-layer CKA heatmap of one archive, or of two archives against each other.
    Heatmap(HeatmapArgs),
    /// Rank examples by first-PC projection at one layer and flag the dominant ones.
    Dominant(DominantArgs),
    /// Remove the most dominant examples and recompute the heatmap.
    Ablate(AblateArgs),
    /// Per-layer principal-component spectrum and first-PC similarity across layers.
    Spectrum(SpectrumArgs),
    /// Kernel matrix of one layer over one minibatch.
    Kernel(KernelArgs),
    /// Train the toy MLP on the planted synthetic dataset.
    TrainToy(TrainToyArgs),
    /// Compare every checkpoint of a toy run with its final model.
    Evolution(EvolutionArgs),
    /// Build a solid-color probe image from one image of a rank-4 archive.
    Probe(ProbeArgs),
    /// Print the JSON schema that every run manifest follows.
    ManifestSchema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelArg {
    Linear,
    Cosine,
    Rbf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, default_value = "repsim-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CkaArgs {
    #[arg(long, value_enum, default_value_t = KernelArg::Linear)]
    pub kernel: KernelArg,
    /// RBF bandwidth as a multiple of the per-batch median distance.
    #[arg(long, default_value_t = 1.0)]
    pub rbf_c: f64,
    /// Minibatch size [default: 256, or 1000 for rbf].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Passes over the examples when accumulating HSIC.
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Seed of the minibatch schedule.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BlockArgs {
    /// Pairwise CKA every layer pair of a block must exceed.
    #[arg(long, default_value_t = repsim_core::blocks::DEFAULT_BLOCK_THRESHOLD)]
    pub threshold: f64,
    /// Smallest block reported [default: a tenth of the layers, at least 2].
    #[arg(long)]
    pub min_block_size: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct HeatmapArgs {
    /// Activation archive (rows of the heatmap).
    pub a: PathBuf,
    /// Second archive over the same examples (columns).
    pub b: Option<PathBuf>,
    #[command(flatten)]
    pub cka: CkaArgs,
    #[command(flatten)]
    pub blocks: BlockArgs,
    /// Subtract each layer's first principal component before comparing.
    #[arg(long)]
    pub remove_first_pc: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
#[group(id = "policy", multiple = false)]
pub struct PolicyArgs {
    /// Flag examples with |projection| above this multiple of the median [default: 10].
    #[arg(long, group = "policy")]
    pub ratio: Option<f64>,
    /// Flag this fraction of examples with the largest |projection|.
    #[arg(long, group = "policy")]
    pub top_fraction: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DominantArgs {
    /// Activation archive.
    pub archive: PathBuf,
    /// Reference layer id.
    #[arg(long)]
    pub layer: String,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Bins of the projection histogram.
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblateArgs {
    /// Activation archive.
    pub archive: PathBuf,
    /// Reference layer id.
    #[arg(long)]
    pub layer: String,
    /// Fraction of examples to remove, largest |projection| first.
    #[arg(long)]
    pub fraction: f64,
    #[command(flatten)]
    pub cka: CkaArgs,
    #[command(flatten)]
    pub blocks: BlockArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SpectrumArgs {
    /// Activation archive.
    pub archive: PathBuf,
    /// Components reported per layer.
    #[arg(long, default_value_t = 10)]
    pub components: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct KernelArgs {
    /// Activation archive.
    pub archive: PathBuf,
    #[arg(long)]
    pub layer: String,
    #[command(flatten)]
    pub cka: CkaArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainToyArgs {
    /// Run configuration (TOML or JSON); built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override whether the first-PC penalty is applied.
    #[arg(long, value_enum)]
    pub reg: Option<Switch>,
    /// Epochs to archive probe activations at (the final epoch always is).
    #[arg(long, value_delimiter = ',')]
    pub checkpoint_epochs: Option<Vec<usize>>,
    /// Seed for the data, the initialization and every derived stream.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvolutionArgs {
    /// Directory written by `train-toy`.
    pub run_dir: PathBuf,
    #[command(flatten)]
    pub cka: CkaArgs,
    /// Fraction of examples flagged dominant at the reference layer.
    #[arg(long, default_value_t = 0.05)]
    pub top_fraction: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProbeArgs {
    /// Archive holding `(n, h, w, c)` images.
    pub images: PathBuf,
    /// Image to probe.
    #[arg(long)]
    pub index: usize,
    /// Layer holding the images; required when the archive has several.
    #[arg(long)]
    pub layer: Option<String>,
    #[command(flatten)]
    pub out: OutArgs,
}
