//! Commands that read activation archives: heatmap, dominant, ablate,
//! spectrum and kernel.

use std::path::Path;

use anyhow::Context;
use log::warn;
use repsim_core::blocks::{
    default_min_block_size, layer_projection, BlockRegion, Histogram, DEFAULT_DOMINANCE_RATIO,
};
use repsim_core::matrix::select_rows;
use repsim_core::{
    ablate_and_recompute, center_columns, cka_heatmap, cka_heatmap_within, detect_blocks,
    detect_dominant, gram, make_schedule, norm_projection_correlation, pc_cosine_similarity,
    principal_components, project_first_pc, remove_first_pc, ActivationArchive, ActivationTensor,
    CkaHeatmap, DominancePolicy, KernelSpec, ScheduleParams,
};
use serde_json::json;

use crate::args::{
    AblateArgs, BlockArgs, CkaArgs, DominantArgs, HeatmapArgs, KernelArg, KernelArgs, SpectrumArgs,
};
use crate::error::CliError;
use crate::manifest::Run;

pub const DEFAULT_BATCH: usize = 256;
/// Larger batches keep the variance of RBF estimates with small bandwidths down.
pub const DEFAULT_RBF_BATCH: usize = 1000;

pub fn read_archive(run: &mut Run, path: &Path) -> anyhow::Result<ActivationArchive> {
    let bytes = run.read_input(path)?;
    ActivationArchive::from_bytes(&bytes).with_context(|| format!("reading {}", path.display()))
}

pub fn kernel_spec(a: &CkaArgs) -> anyhow::Result<KernelSpec> {
    Ok(match a.kernel {
        KernelArg::Linear => KernelSpec::linear(),
        KernelArg::Cosine => KernelSpec::cosine(),
        KernelArg::Rbf => KernelSpec::rbf(a.rbf_c)?,
    })
}

/// The requested batch size, or the kernel's default capped at `n`.
pub fn resolve_batch(a: &CkaArgs, n: usize) -> usize {
    if let Some(b) = a.batch {
        return b;
    }
    let default = if a.kernel == KernelArg::Rbf {
        DEFAULT_RBF_BATCH
    } else {
        DEFAULT_BATCH
    };
    if default > n {
        warn!("only {n} examples; using a batch of {n} instead of {default}");
        n
    } else {
        default
    }
}

fn min_block_size(b: &BlockArgs, layers: usize) -> usize {
    b.min_block_size.unwrap_or_else(|| default_min_block_size(layers))
}

pub fn write_heatmap(run: &mut Run, stem: &str, h: &CkaHeatmap) -> anyhow::Result<()> {
    run.write(&format!("{stem}.json"), (h.to_json() + "\n").as_bytes())?;
    run.write(&format!("{stem}.csv"), h.to_csv().as_bytes())?;
    run.write(&format!("{stem}.pgm"), &h.to_pgm())
}

fn strip_first_pc(a: &ActivationArchive) -> anyhow::Result<ActivationArchive> {
    let layers = a
        .layers()
        .iter()
        .map(|t| {
            let x = center_columns(&t.to_matrix());
            let s = principal_components(&x, 1)
                .with_context(|| format!("layer `{}`", t.layer_id()))?;
            Ok(ActivationTensor::from_matrix(t.layer_id(), &remove_first_pc(&x, &s))?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let out = ActivationArchive::new(layers, Some(a.example_ids().to_vec()), a.metadata().clone())?;
    Ok(out.with_metadata("first_pc_removed", "true"))
}

pub fn heatmap(a: HeatmapArgs) -> anyhow::Result<()> {
    let mut run = Run::new("heatmap", &a, &a.out.out)?;
    let mut rows = read_archive(&mut run, &a.a)?;
    let mut cols = match &a.b {
        Some(p) => Some(read_archive(&mut run, p)?),
        None => None,
    };
    if a.remove_first_pc {
        rows = strip_first_pc(&rows)?;
        cols = cols.as_ref().map(strip_first_pc).transpose()?;
    }
    let spec = kernel_spec(&a.cka)?;
    let batch = resolve_batch(&a.cka, rows.n());
    let schedule = make_schedule(rows.n(), batch, a.cka.epochs, a.cka.seed)?;
    run.seed("schedule", a.cka.seed);
    let h = match &cols {
        Some(b) => cka_heatmap(&rows, b, &spec, &schedule)?,
        None => cka_heatmap_within(&rows, &spec, &schedule)?,
    };
    write_heatmap(&mut run, "heatmap", &h)?;
    if h.is_square() && cols.is_none() {
        let min = min_block_size(&a.blocks, h.rows());
        let blocks = detect_blocks(&h, a.blocks.threshold, min)?;
        run.write_json(
            "blocks.json",
            &json!({ "threshold": a.blocks.threshold, "min_block_size": min, "blocks": blocks }),
        )?;
    }
    run.finish()?;
    Ok(())
}

pub fn dominant(a: DominantArgs) -> anyhow::Result<()> {
    let mut run = Run::new("dominant", &a, &a.out.out)?;
    let archive = read_archive(&mut run, &a.archive)?;
    let policy = match (a.policy.ratio, a.policy.top_fraction) {
        (_, Some(f)) => DominancePolicy::TopFraction(f),
        (Some(r), None) => DominancePolicy::Ratio(r),
        (None, None) => DominancePolicy::Ratio(DEFAULT_DOMINANCE_RATIO),
    };
    let lp = layer_projection(&archive, &a.layer)?;
    let report = detect_dominant(&lp.projections, archive.example_ids(), policy, &a.layer)?;
    let hist = Histogram::new(&lp.projections, a.bins)?;
    let correlation = norm_projection_correlation(&lp.centered, &lp.summary).ok();
    run.write_json(
        "dominant_report.json",
        &json!({
            "report": report,
            "frac_first": lp.summary.frac_first,
            "norm_projection_correlation": correlation,
        }),
    )?;
    run.write("projection_histogram.csv", hist.to_csv().as_bytes())?;
    let mut csv = String::from("example_id,projection\n");
    for (id, p) in archive.example_ids().iter().zip(&lp.projections) {
        csv.push_str(&format!("{id},{p}\n"));
    }
    run.write("projections.csv", csv.as_bytes())?;
    run.finish()?;
    Ok(())
}

fn max_abs_change(pre: &CkaHeatmap, post: &CkaHeatmap) -> f64 {
    pre.values
        .iter()
        .zip(&post.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

pub fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let mut run = Run::new("ablate", &a, &a.out.out)?;
    let archive = read_archive(&mut run, &a.archive)?;
    if archive.layer(&a.layer).is_none() {
        return Err(CliError::Usage(format!("unknown layer `{}`", a.layer)).into());
    }
    let spec = kernel_spec(&a.cka)?;
    let params = ScheduleParams {
        batch_size: resolve_batch(&a.cka, archive.n()),
        epochs: a.cka.epochs,
        seed: a.cka.seed,
    };
    run.seed("schedule", a.cka.seed);
    let res = ablate_and_recompute(&archive, &a.layer, a.fraction, &spec, params)?;
    let pre = params.heatmap(&archive, &spec)?;
    let min = min_block_size(&a.blocks, pre.rows());
    let before: Vec<BlockRegion> = detect_blocks(&pre, a.blocks.threshold, min)?;
    let after: Vec<BlockRegion> = detect_blocks(&res.heatmap_after, a.blocks.threshold, min)?;

    write_heatmap(&mut run, "heatmap_pre", &pre)?;
    write_heatmap(&mut run, "heatmap_post", &res.heatmap_after)?;
    run.write_json("dominant_post.json", &res.after)?;
    run.write_json(
        "block_diff.json",
        &json!({
            "threshold": a.blocks.threshold,
            "min_block_size": min,
            "removed_count": res.removed.len(),
            "removed_ids": res.removed_ids,
            "blocks_before": before,
            "blocks_after": after,
            "max_abs_cka_change": max_abs_change(&pre, &res.heatmap_after),
        }),
    )?;
    run.finish()?;
    Ok(())
}

pub fn spectrum(a: SpectrumArgs) -> anyhow::Result<()> {
    let mut run = Run::new("spectrum", &a, &a.out.out)?;
    let archive = read_archive(&mut run, &a.archive)?;
    if a.components == 0 {
        return Err(CliError::Usage("--components must be positive".into()).into());
    }
    let mut layers = Vec::new();
    let mut csv = String::from("layer,component,eigenvalue,variance_fraction\n");
    let mut projections = Vec::new();
    for t in archive.layers() {
        let x = center_columns(&t.to_matrix());
        let k = a.components.min(x.nrows()).min(x.ncols());
        let s = principal_components(&x, k).with_context(|| format!("layer `{}`", t.layer_id()))?;
        for (i, (l, f)) in s.eigenvalues.iter().zip(s.variance_fractions()).enumerate() {
            csv.push_str(&format!("{},{},{l},{f}\n", t.layer_id(), i + 1));
        }
        let mut entry = s.to_json(false);
        entry["layer"] = json!(t.layer_id());
        layers.push(entry);
        projections.push(project_first_pc(&x, &s));
    }
    let ids = archive.layer_ids();
    let mut cos = String::from("layer");
    for id in &ids {
        cos.push(',');
        cos.push_str(id);
    }
    cos.push('\n');
    for (i, pi) in projections.iter().enumerate() {
        cos.push_str(&ids[i]);
        for pj in &projections {
            cos.push_str(&format!(",{}", pc_cosine_similarity(pi, pj)?));
        }
        cos.push('\n');
    }
    run.write_json("spectrum.json", &json!({ "layers": layers }))?;
    run.write("spectrum.csv", csv.as_bytes())?;
    run.write("pc_cosine.csv", cos.as_bytes())?;
    run.finish()?;
    Ok(())
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

pub fn kernel(a: KernelArgs) -> anyhow::Result<()> {
    let mut run = Run::new("kernel", &a, &a.out.out)?;
    let archive = read_archive(&mut run, &a.archive)?;
    let t = archive
        .layer(&a.layer)
        .ok_or_else(|| CliError::Usage(format!("unknown layer `{}`", a.layer)))?;
    let spec = kernel_spec(&a.cka)?;
    let batch = resolve_batch(&a.cka, archive.n());
    let schedule = make_schedule(archive.n(), batch, 1, a.cka.seed)?;
    run.seed("schedule", a.cka.seed);
    let idx = &schedule.batches[0];
    let k = gram(&select_rows(&t.to_matrix(), idx), &spec)?;
    let ids: Vec<&str> = idx.iter().map(|&i| archive.example_ids()[i].as_str()).collect();

    let mut csv = String::from("example_id");
    for id in &ids {
        csv.push(',');
        csv.push_str(id);
    }
    csv.push('\n');
    for (i, id) in ids.iter().enumerate() {
        csv.push_str(id);
        for j in 0..k.n() {
            csv.push_str(&format!(",{}", k.values[(i, j)]));
        }
        csv.push('\n');
    }
    let diag: Vec<f64> = (0..k.n()).map(|i| k.values[(i, i)]).collect();
    let (lo, hi) = min_max(k.values.iter().copied());
    let (dlo, dhi) = min_max(diag.iter().copied());
    run.write("kernel.csv", csv.as_bytes())?;
    run.write_json(
        "kernel.json",
        &json!({
            "layer": a.layer,
            "kernel": k.kind,
            "bandwidth_sigma": k.bandwidth_sigma,
            "batch_size": batch,
            "example_ids": ids,
            "min": lo,
            "max": hi,
            "diagonal_min": dlo,
            "diagonal_max": dhi,
        }),
    )?;
    run.finish()?;
    Ok(())
}
