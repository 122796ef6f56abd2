//! Representational-similarity analysis for layer activations.
//!
//! The crate covers the full path from stored activations to conclusions
//! about block structure:
//!
//! - [`archive`]: per-layer activation archives and the `ACTV` file format
//! - [`schedule`]: deterministic minibatch schedules
//! - [`kernels`]: linear, cosine and RBF kernel matrices
//! - [`cka`]: unbiased HSIC, minibatch CKA and layer-by-layer heatmaps
//! - [`spectral`]: principal components, first-PC removal, power iteration
//! - [`blocks`]: block detection, dominant datapoints and removal experiments

pub mod archive;
pub mod blocks;
pub mod cka;
pub mod error;
pub mod kernels;
pub mod matrix;
pub mod schedule;
pub mod spectral;

pub use archive::{flatten_feature_map, load_archive, save_archive, ActivationArchive, ActivationTensor};
pub use blocks::{
    ablate_and_recompute, detect_blocks, detect_dominant, norm_profile, norm_projection_correlation,
    solid_color_probe, AblationResult, BlockRegion, DominancePolicy, DominantReport, NormProfile,
    ScheduleParams,
};
pub use cka::{
    cka_heatmap, cka_heatmap_within, cka_pc_decomposition, hsic1, minibatch_cka, CkaAccumulator,
    CkaHeatmap,
};
pub use error::{Error, Result};
pub use kernels::{gram, gram_cosine, gram_linear, gram_rbf, median_pairwise_distance, KernelKind, KernelMatrix, KernelSpec};
pub use matrix::{center_columns, Matrix, Vector};
pub use schedule::{derive_seed, make_schedule, MinibatchSchedule};
pub use spectral::{
    pc_cosine_similarity, power_iteration_step, principal_components, project_first_pc,
    remove_first_pc, PcSummary, PowerIterState,
};
