//! Block-structure detection, dominant datapoints, removal experiments,
//! activation-norm profiles and solid-color probes.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::archive::{ActivationArchive, ActivationTensor};
use crate::cka::{cka_heatmap_within, CkaHeatmap};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::matrix::{center_columns, median, pearson, row_norms, Matrix};
use crate::schedule::{make_schedule, MIN_BATCH};
use crate::spectral::{principal_components, project_first_pc, PcSummary};

pub const DEFAULT_BLOCK_THRESHOLD: f64 = 0.95;
pub const DEFAULT_DOMINANCE_RATIO: f64 = 10.0;

/// Contiguous layer range whose pairwise CKA all exceed the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRegion {
    pub start_layer: usize,
    pub end_layer: usize,
    pub start_label: String,
    pub end_label: String,
    pub mean_internal_cka: f64,
    pub size: usize,
}

impl BlockRegion {
    pub fn center(&self) -> usize {
        (self.start_layer + self.end_layer) / 2
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.start_layer..=self.end_layer).contains(&layer)
    }
}

/// Default minimum block size: a tenth of the layer count, at least 2.
pub fn default_min_block_size(layers: usize) -> usize {
    ((layers as f64 * 0.1).ceil() as usize).max(2)
}

fn pair_ok(h: &CkaHeatmap, i: usize, j: usize, threshold: f64) -> bool {
    h.get(i, j) > threshold && h.get(j, i) > threshold
}

/// Greedy left-to-right scan: from each start, extend while every
/// off-diagonal pair stays above `threshold`; keep ranges of at least
/// `min_size` layers and resume after them.
pub fn detect_blocks(h: &CkaHeatmap, threshold: f64, min_size: usize) -> Result<Vec<BlockRegion>> {
    if !h.is_square() {
        return Err(Error::Argument(format!(
            "block detection needs a square heatmap, got {}x{}",
            h.rows(),
            h.cols()
        )));
    }
    let l = h.rows();
    let min_size = min_size.max(1);
    let mut blocks = Vec::new();
    let mut start = 0;
    while start < l {
        let mut end = start;
        while end + 1 < l && (start..=end).all(|i| pair_ok(h, i, end + 1, threshold)) {
            end += 1;
        }
        if end - start + 1 >= min_size {
            blocks.push(BlockRegion {
                start_layer: start,
                end_layer: end,
                start_label: h.row_labels[start].clone(),
                end_label: h.row_labels[end].clone(),
                mean_internal_cka: h.mean_within(start, end),
                size: end - start + 1,
            });
            start = end + 1;
        } else {
            start += 1;
        }
    }
    Ok(blocks)
}

/// The block with the most layers (earliest on ties).
pub fn largest_block(blocks: &[BlockRegion]) -> Option<&BlockRegion> {
    blocks
        .iter()
        .fold(None, |best: Option<&BlockRegion>, b| match best {
            Some(cur) if cur.size >= b.size => Some(cur),
            _ => Some(b),
        })
}

/// How dominant examples are selected from first-PC projections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "value")]
pub enum DominancePolicy {
    /// `|proj| > τ · median(|proj|)`.
    Ratio(f64),
    /// The `⌈f·n⌉` largest `|proj|`.
    TopFraction(f64),
}

impl DominancePolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DominancePolicy::Ratio(t) if t > 0.0 && t.is_finite() => Ok(()),
            DominancePolicy::TopFraction(f) if f > 0.0 && f <= 1.0 => Ok(()),
            other => Err(Error::Argument(format!("invalid dominance policy {other:?}"))),
        }
    }
}

/// `⌈f·n⌉`, tolerant of representation error in `f`.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedExample {
    pub index: usize,
    pub example_id: String,
    pub projection: f64,
    /// `|projection| / median(|projection|)`; absent when the median is 0.
    pub ratio_to_median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominantReport {
    pub reference_layer: String,
    pub policy: DominancePolicy,
    pub median_abs_projection: f64,
    /// All examples by decreasing `|projection|` (ties by index).
    pub ranked: Vec<RankedExample>,
    /// Number of leading entries of `ranked` flagged dominant.
    pub selected_count: usize,
    /// Mean `|proj|` of the selection over the median `|proj|` of the rest.
    pub bimodality_ratio: Option<f64>,
}

impl DominantReport {
    pub fn selected(&self) -> &[RankedExample] {
        &self.ranked[..self.selected_count]
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        self.selected().iter().map(|r| r.index).collect()
    }

    pub fn selected_ids(&self) -> Vec<String> {
        self.selected().iter().map(|r| r.example_id.clone()).collect()
    }
}

pub fn detect_dominant(
    projections: &[f64],
    example_ids: &[String],
    policy: DominancePolicy,
    reference_layer: &str,
) -> Result<DominantReport> {
    let n = projections.len();
    if n < 2 {
        return Err(Error::Argument(format!(
            "dominance detection needs at least 2 examples, got {n}"
        )));
    }
    if example_ids.len() != n {
        return Err(Error::Argument(format!(
            "{} ids for {n} projections",
            example_ids.len()
        )));
    }
    policy.validate()?;
    let abs: Vec<f64> = projections.iter().map(|p| p.abs()).collect();
    let med = median(&abs).expect("n >= 2");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs[b].total_cmp(&abs[a]).then(a.cmp(&b)));

    let all_zero = abs.iter().all(|&a| a == 0.0);
    let selected_count = if all_zero {
        0
    } else {
        match policy {
            DominancePolicy::Ratio(tau) => order.iter().take_while(|&&i| abs[i] > tau * med).count(),
            DominancePolicy::TopFraction(f) => fraction_count(f, n).min(n),
        }
    };
    let ranked = order
        .iter()
        .map(|&i| RankedExample {
            index: i,
            example_id: example_ids[i].clone(),
            projection: projections[i],
            ratio_to_median: (med > 0.0).then(|| abs[i] / med),
        })
        .collect();

    let bimodality_ratio = if selected_count == 0 || selected_count == n {
        None
    } else {
        let sel_mean =
            order[..selected_count].iter().map(|&i| abs[i]).sum::<f64>() / selected_count as f64;
        let rest: Vec<f64> = order[selected_count..].iter().map(|&i| abs[i]).collect();
        let rest_med = median(&rest).expect("rest nonempty");
        (rest_med > 0.0).then(|| sel_mean / rest_med)
    };

    Ok(DominantReport {
        reference_layer: reference_layer.to_string(),
        policy,
        median_abs_projection: med,
        ranked,
        selected_count,
        bimodality_ratio,
    })
}

/// Centered matrix, PC summary and first-PC projections of one layer.
pub struct LayerProjection {
    pub centered: Matrix,
    pub summary: PcSummary,
    pub projections: Vec<f64>,
}

pub fn layer_projection(archive: &ActivationArchive, layer_id: &str) -> Result<LayerProjection> {
    let t = archive
        .layer(layer_id)
        .ok_or_else(|| Error::Argument(format!("unknown layer `{layer_id}`")))?;
    let centered = center_columns(&t.to_matrix());
    let summary = principal_components(&centered, 1).map_err(|e| match e {
        Error::Degenerate(m) => Error::Degenerate(format!("layer `{layer_id}`: {m}")),
        other => other,
    })?;
    let projections = project_first_pc(&centered, &summary);
    Ok(LayerProjection {
        centered,
        summary,
        projections,
    })
}

/// Dominant report for one archive layer.
pub fn dominant_at_layer(
    archive: &ActivationArchive,
    layer_id: &str,
    policy: DominancePolicy,
) -> Result<DominantReport> {
    let lp = layer_projection(archive, layer_id)?;
    detect_dominant(&lp.projections, archive.example_ids(), policy, layer_id)
}

/// Schedule settings reused when recomputing heatmaps on a reduced archive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl ScheduleParams {
    /// Heatmap of `archive` with the batch size capped at its example count.
    pub fn heatmap(&self, archive: &ActivationArchive, spec: &KernelSpec) -> Result<CkaHeatmap> {
        let batch = self.batch_size.min(archive.n());
        let schedule = make_schedule(archive.n(), batch, self.epochs, self.seed)?;
        cka_heatmap_within(archive, spec, &schedule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub before: DominantReport,
    /// Archive indices that were dropped, by decreasing `|projection|`.
    pub removed: Vec<usize>,
    pub removed_ids: Vec<String>,
    pub heatmap_after: CkaHeatmap,
    /// Dominant examples of the reduced archive at the same layer.
    pub after: DominantReport,
}

/// Drops the `⌈fraction·n⌉` examples with the largest `|projection|` at
/// `reference_layer` and recomputes the heatmap on the remainder.
pub fn ablate_and_recompute(
    archive: &ActivationArchive,
    reference_layer: &str,
    fraction: f64,
    spec: &KernelSpec,
    params: ScheduleParams,
) -> Result<AblationResult> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!(
            "removal fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = archive.n();
    let drop = fraction_count(fraction, n);
    let remaining = n.saturating_sub(drop);
    if remaining < MIN_BATCH {
        return Err(Error::Argument(format!(
            "removing {drop} of {n} examples leaves {remaining}, need at least {MIN_BATCH}"
        )));
    }
    let policy = DominancePolicy::TopFraction(fraction);
    let before = dominant_at_layer(archive, reference_layer, policy)?;
    let removed = before.selected_indices();
    let removed_set: HashSet<usize> = removed.iter().copied().collect();
    let keep: Vec<usize> = (0..n).filter(|i| !removed_set.contains(i)).collect();
    let reduced = archive.subset(&keep)?;
    let heatmap_after = params.heatmap(&reduced, spec)?;
    let after = dominant_at_layer(&reduced, reference_layer, policy)?;
    Ok(AblationResult {
        removed_ids: before.selected_ids(),
        before,
        removed,
        heatmap_after,
        after,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormProfile {
    pub layer_ids: Vec<String>,
    pub example_norms: Vec<f64>,
    pub median_norms: Vec<f64>,
}

impl NormProfile {
    /// Example norm over reference median per layer (`None` if the median is 0).
    pub fn ratios(&self) -> Vec<Option<f64>> {
        self.example_norms
            .iter()
            .zip(&self.median_norms)
            .map(|(e, m)| (*m > 0.0).then(|| e / m))
            .collect()
    }
}

fn row_norm(t: &ActivationTensor, i: usize) -> f64 {
    t.row(i)
        .iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Raw activation norms of one example next to the median norm of a
/// reference batch, per layer.
pub fn norm_profile(
    archive: &ActivationArchive,
    example_index: usize,
    reference_batch: &[usize],
) -> Result<NormProfile> {
    let n = archive.n();
    if example_index >= n || reference_batch.iter().any(|&i| i >= n) {
        return Err(Error::Argument(format!("example index out of range (n = {n})")));
    }
    if reference_batch.is_empty() {
        return Err(Error::Argument("reference batch is empty".into()));
    }
    let mut example_norms = Vec::with_capacity(archive.layer_count());
    let mut median_norms = Vec::with_capacity(archive.layer_count());
    for t in archive.layers() {
        example_norms.push(row_norm(t, example_index));
        let norms: Vec<f64> = reference_batch.iter().map(|&i| row_norm(t, i)).collect();
        median_norms.push(median(&norms).expect("nonempty"));
    }
    Ok(NormProfile {
        layer_ids: archive.layer_ids(),
        example_norms,
        median_norms,
    })
}

/// Pearson correlation between per-example norms of the centered matrix and
/// `|projection|` onto its first PC.
pub fn norm_projection_correlation(x: &Matrix, summary: &PcSummary) -> Result<f64> {
    if x.nrows() < 3 {
        return Err(Error::Argument("correlation needs at least 3 examples".into()));
    }
    let norms = row_norms(x);
    let proj: Vec<f64> = project_first_pc(x, summary).iter().map(|p| p.abs()).collect();
    pearson(&norms, &proj)
        .ok_or_else(|| Error::Degenerate("zero variance in norms or projections".into()))
}

/// Replaces every pixel of an `h x w x c` image with its top-left pixel.
pub fn solid_color_probe(image: &[f32], h: usize, w: usize, c: usize) -> Result<Vec<f32>> {
    if h == 0 || w == 0 || c == 0 || image.len() != h * w * c {
        return Err(Error::Argument(format!(
            "image of {} values does not match {h}x{w}x{c}",
            image.len()
        )));
    }
    let pixel = &image[..c];
    Ok(pixel.iter().copied().cycle().take(h * w * c).collect())
}

/// Solid-color probe of image `index` of a rank-4 `(n, h, w, c)` tensor,
/// returned as a `(1, h, w, c)` tensor with the same layer id.
pub fn probe_tensor(images: &ActivationTensor, index: usize) -> Result<ActivationTensor> {
    if images.rank() != 4 {
        return Err(Error::Argument(format!(
            "layer `{}` has rank {}; probes need (n, h, w, c) images",
            images.layer_id(),
            images.rank()
        )));
    }
    if index >= images.n() {
        return Err(Error::Argument(format!(
            "image index {index} out of range (n = {})",
            images.n()
        )));
    }
    let (h, w, c) = (images.shape()[1], images.shape()[2], images.shape()[3]);
    let probe = solid_color_probe(images.row(index), h, w, c)?;
    ActivationTensor::new(images.layer_id(), vec![1, h, w, c], probe)
}

/// Histogram of `values` over `bins` equal-width bins spanning their range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 || values.is_empty() {
            return Err(Error::Argument("histogram needs values and at least one bin".into()));
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0usize; bins];
        for &v in values {
            let b = (((v - lo) / width).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        Ok(Self { edges, counts })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        out
    }
}

/// `|A ∩ B| / |A ∪ B|`; two empty sets count as identical.
pub fn jaccard<T: Eq + std::hash::Hash>(a: &[T], b: &[T]) -> f64 {
    let sa: HashSet<&T> = a.iter().collect();
    let sb: HashSet<&T> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}
