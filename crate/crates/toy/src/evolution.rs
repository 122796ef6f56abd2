//! How representations and dominant datapoints change across checkpoints,
//! measured against the final model.

use repsim_core::blocks::{dominant_at_layer, jaccard, largest_block, layer_projection};
use repsim_core::{
    cka_heatmap, detect_blocks, make_schedule, ActivationArchive, BlockRegion, CkaHeatmap,
    DominancePolicy, DominantReport, Error, KernelSpec, ScheduleParams,
};
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const BLOCK_THRESHOLD: f64 = 0.95;
pub const MIN_BLOCK_SIZE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEvolution {
    pub name: String,
    pub within: CkaHeatmap,
    pub cross_to_final: CkaHeatmap,
    pub within_blocks: Vec<BlockRegion>,
    pub dominant: DominantReport,
    /// `|projection|` at the reference layer of each final dominant example,
    /// in the order of the final report.
    pub tracked_magnitudes: Vec<f64>,
    /// Jaccard overlap of this checkpoint's dominant set with the final one.
    pub overlap_with_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionReport {
    pub reference_layer: String,
    pub final_block: Option<BlockRegion>,
    pub final_within: CkaHeatmap,
    pub final_dominant: DominantReport,
    pub checkpoints: Vec<CheckpointEvolution>,
}

impl EvolutionReport {
    /// Mean diagonal of each checkpoint's cross heatmap over the final
    /// block's layers (`None` without a final block).
    pub fn block_cross_means(&self) -> Option<Vec<f64>> {
        let b = self.final_block.as_ref()?;
        Some(
            self.checkpoints
                .iter()
                .map(|c| {
                    let d = c.cross_to_final.diagonal();
                    d[b.start_layer..=b.end_layer].iter().sum::<f64>() / b.size as f64
                })
                .collect(),
        )
    }

    /// CSV table of checkpoint, selected count and overlap with the final set.
    pub fn overlap_csv(&self) -> String {
        let mut out = String::from("checkpoint,selected,overlap_with_final\n");
        for c in &self.checkpoints {
            out.push_str(&format!(
                "{},{},{}\n",
                c.name, c.dominant.selected_count, c.overlap_with_final
            ));
        }
        out
    }
}

/// Compares every named checkpoint with `final_archive`.
///
/// The reference layer is the centre of the largest block of the final
/// heatmap, or the middle layer when it has none.
pub fn evolution_report(
    checkpoints: &[(String, ActivationArchive)],
    final_archive: &ActivationArchive,
    spec: &KernelSpec,
    params: ScheduleParams,
    policy: DominancePolicy,
) -> Result<EvolutionReport> {
    for (name, a) in checkpoints {
        if a.example_ids() != final_archive.example_ids() {
            return Err(Error::Consistency(format!(
                "checkpoint `{name}` was captured on a different probe set"
            ))
            .into());
        }
        if a.layer_ids() != final_archive.layer_ids() {
            return Err(Error::Consistency(format!(
                "checkpoint `{name}` has different layers from the final model"
            ))
            .into());
        }
    }
    let final_within = params.heatmap(final_archive, spec)?;
    let blocks = detect_blocks(&final_within, BLOCK_THRESHOLD, MIN_BLOCK_SIZE)?;
    let final_block = largest_block(&blocks).cloned();
    let ref_index = final_block
        .as_ref()
        .map_or(final_archive.layer_count() / 2, BlockRegion::center);
    let reference_layer = final_archive.layer_ids()[ref_index].clone();
    let final_dominant = dominant_at_layer(final_archive, &reference_layer, policy)?;
    let final_set = final_dominant.selected_indices();

    let batch = params.batch_size.min(final_archive.n());
    let schedule = make_schedule(final_archive.n(), batch, params.epochs, params.seed)?;
    let mut out = Vec::with_capacity(checkpoints.len());
    for (name, a) in checkpoints {
        let within = params.heatmap(a, spec)?;
        let within_blocks = detect_blocks(&within, BLOCK_THRESHOLD, MIN_BLOCK_SIZE)?;
        let cross_to_final = cka_heatmap(a, final_archive, spec, &schedule)?;
        let lp = layer_projection(a, &reference_layer)?;
        let dominant =
            repsim_core::detect_dominant(&lp.projections, a.example_ids(), policy, &reference_layer)?;
        let tracked_magnitudes = final_set.iter().map(|&i| lp.projections[i].abs()).collect();
        let overlap_with_final = jaccard(&dominant.selected_indices(), &final_set);
        out.push(CheckpointEvolution {
            name: name.clone(),
            within,
            cross_to_final,
            within_blocks,
            dominant,
            tracked_magnitudes,
            overlap_with_final,
        });
    }
    Ok(EvolutionReport {
        reference_layer,
        final_block,
        final_within,
        final_dominant,
        checkpoints: out,
    })
}
