//! Minibatch CKA built on the unbiased HSIC estimator.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::ActivationArchive;
use crate::error::{Error, Result};
use crate::kernels::{gram, KernelMatrix, KernelSpec};
use crate::matrix::{select_rows, Matrix};
use crate::schedule::{MinibatchSchedule, MIN_BATCH};
use crate::spectral::principal_components;

/// Unbiased HSIC estimator of two `n x n` kernel matrices, `n >= 4`.
///
/// Both matrices are treated as symmetric; diagonals are ignored.
pub fn hsic1(k: &KernelMatrix, l: &KernelMatrix) -> Result<f64> {
    hsic1_values(&k.values, &l.values)
}

pub(crate) fn hsic1_values(k: &Matrix, l: &Matrix) -> Result<f64> {
    let n = k.nrows();
    if k.shape() != (n, n) || l.shape() != (n, n) {
        return Err(Error::Argument(format!(
            "hsic1 needs two square matrices of equal size, got {:?} and {:?}",
            k.shape(),
            l.shape()
        )));
    }
    if n < MIN_BATCH {
        return Err(Error::Argument(format!(
            "hsic1 is undefined for n = {n} (need n >= 4)"
        )));
    }
    // Work with the zero-diagonal versions without copying.
    let mut trace_kl = 0.0;
    let mut row_k = vec![0.0; n];
    let mut row_l = vec![0.0; n];
    for j in 0..n {
        let (kc, lc) = (k.column(j), l.column(j));
        for i in 0..n {
            if i == j {
                continue;
            }
            trace_kl += kc[i] * lc[i];
            row_k[j] += kc[i];
            row_l[j] += lc[i];
        }
    }
    let sum_k: f64 = row_k.iter().sum();
    let sum_l: f64 = row_l.iter().sum();
    let cross: f64 = row_k.iter().zip(&row_l).map(|(a, b)| a * b).sum();
    let nf = n as f64;
    let value = (trace_kl + sum_k * sum_l / ((nf - 1.0) * (nf - 2.0)) - 2.0 * cross / (nf - 2.0))
        / (nf * (nf - 3.0));
    Ok(value)
}

/// Running sums of the three HSIC terms of minibatch CKA.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CkaAccumulator {
    pub sum_xy: f64,
    pub sum_xx: f64,
    pub sum_yy: f64,
    pub batch_count: usize,
}

impl CkaAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, k: &KernelMatrix, l: &KernelMatrix) -> Result<()> {
        if k.n() != l.n() {
            return Err(Error::Argument(format!(
                "kernel sizes differ: {} vs {}",
                k.n(),
                l.n()
            )));
        }
        let xy = hsic1(k, l)?;
        let xx = hsic1(k, k)?;
        let yy = hsic1(l, l)?;
        self.add_terms(xy, xx, yy);
        Ok(())
    }

    /// Adds precomputed HSIC values for one batch.
    pub fn add_terms(&mut self, xy: f64, xx: f64, yy: f64) {
        self.sum_xy += xy;
        self.sum_xx += xx;
        self.sum_yy += yy;
        self.batch_count += 1;
    }

    /// Raw CKA estimate; may fall slightly outside `[0, 1]` on small batches.
    pub fn finalize(&self) -> Result<f64> {
        if self.batch_count == 0 {
            return Err(Error::Degenerate("no batches accumulated".into()));
        }
        if !(self.sum_xx > 0.0 && self.sum_yy > 0.0) {
            return Err(Error::Degenerate(format!(
                "self-similarity sums must be positive (xx = {}, yy = {})",
                self.sum_xx, self.sum_yy
            )));
        }
        let k = self.batch_count as f64;
        Ok((self.sum_xy / k) / ((self.sum_xx / k) * (self.sum_yy / k)).sqrt())
    }
}

/// Clamps a raw CKA value into `[0, 1]` for display.
pub fn clamp_for_display(cka: f64) -> f64 {
    cka.clamp(0.0, 1.0)
}

/// Minibatch CKA between two representations of the same examples.
pub fn minibatch_cka(
    x: &Matrix,
    y: &Matrix,
    spec: &KernelSpec,
    schedule: &MinibatchSchedule,
) -> Result<f64> {
    if x.nrows() != y.nrows() || x.nrows() != schedule.n {
        return Err(Error::Consistency(format!(
            "example counts differ: {} / {} / schedule {}",
            x.nrows(),
            y.nrows(),
            schedule.n
        )));
    }
    let mut acc = CkaAccumulator::new();
    for batch in &schedule.batches {
        let k = gram(&select_rows(x, batch), spec)?;
        let l = gram(&select_rows(y, batch), spec)?;
        acc.accumulate(&k, &l)?;
    }
    acc.finalize()
}

/// Archive metadata of the two sides of a heatmap.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub rows: BTreeMap<String, String>,
    pub cols: BTreeMap<String, String>,
}

/// Layer-by-layer CKA scores (raw estimator values, row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaHeatmap {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<f64>,
    pub kernel: KernelSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub provenance: Provenance,
}

impl CkaHeatmap {
    pub fn rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn cols(&self) -> usize {
        self.col_labels.len()
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows().min(self.cols())).map(|i| self.get(i, i)).collect()
    }

    /// Mean over all ordered off-diagonal pairs inside `start..=end`.
    pub fn mean_within(&self, start: usize, end: usize) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in start..=end {
            for j in start..=end {
                if i != j {
                    sum += self.get(i, j);
                    count += 1;
                }
            }
        }
        if count == 0 {
            self.get(start, start)
        } else {
            sum / count as f64
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("heatmap serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("heatmap JSON: {e}")))
    }

    /// CSV with a header row of column labels and one labelled row per
    /// row layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for c in &self.col_labels {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (i, r) in self.row_labels.iter().enumerate() {
            out.push_str(r);
            for j in 0..self.cols() {
                out.push(',');
                out.push_str(&self.get(i, j).to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Binary greyscale PGM (P5), one pixel per cell, `round(255 * clamp(v))`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols(), self.rows()).into_bytes();
        out.extend(
            self.values
                .iter()
                .map(|&v| (255.0 * clamp_for_display(v)).round() as u8),
        );
        out
    }
}

/// CKA between every layer of `a` (rows) and every layer of `b` (columns).
///
/// When `a` and `b` are the same archive only the upper triangle is
/// estimated and mirrored.
pub fn cka_heatmap(
    a: &ActivationArchive,
    b: &ActivationArchive,
    spec: &KernelSpec,
    schedule: &MinibatchSchedule,
) -> Result<CkaHeatmap> {
    if std::ptr::eq(a, b) {
        return cka_heatmap_within(a, spec, schedule);
    }
    if a.example_ids() != b.example_ids() {
        return Err(Error::Consistency(
            "archives differ in example count or ordering; align them by example id first".into(),
        ));
    }
    let xa = a.layer_matrices();
    let xb = b.layer_matrices();
    let pairs: Vec<(usize, usize)> = (0..xa.len())
        .flat_map(|i| (0..xb.len()).map(move |j| (i, j)))
        .collect();
    let values = accumulate_pairs(&xa, Some(&xb), &pairs, spec, schedule, &labels(a), &labels(b))?;
    Ok(CkaHeatmap {
        row_labels: a.layer_ids(),
        col_labels: b.layer_ids(),
        values,
        kernel: *spec,
        batch_size: schedule.batch_size,
        epochs: schedule.epochs,
        seed: schedule.seed,
        provenance: Provenance {
            rows: a.metadata().clone(),
            cols: b.metadata().clone(),
        },
    })
}

/// Square heatmap of one archive against itself.
pub fn cka_heatmap_within(
    a: &ActivationArchive,
    spec: &KernelSpec,
    schedule: &MinibatchSchedule,
) -> Result<CkaHeatmap> {
    let xa = a.layer_matrices();
    let l = xa.len();
    let pairs: Vec<(usize, usize)> = (0..l).flat_map(|i| (i..l).map(move |j| (i, j))).collect();
    let upper = accumulate_pairs(&xa, None, &pairs, spec, schedule, &labels(a), &labels(a))?;
    let mut values = vec![0.0; l * l];
    for (&(i, j), &v) in pairs.iter().zip(&upper) {
        values[i * l + j] = v;
        values[j * l + i] = v;
    }
    Ok(CkaHeatmap {
        row_labels: a.layer_ids(),
        col_labels: a.layer_ids(),
        values,
        kernel: *spec,
        batch_size: schedule.batch_size,
        epochs: schedule.epochs,
        seed: schedule.seed,
        provenance: Provenance {
            rows: a.metadata().clone(),
            cols: a.metadata().clone(),
        },
    })
}

fn labels(a: &ActivationArchive) -> Vec<String> {
    a.layer_ids()
}

/// Runs the schedule once, computing each layer's kernel matrix per batch a
/// single time. Every pair keeps its own sums, reduced in batch order, so the
/// result does not depend on how rayon splits the work.
fn accumulate_pairs(
    xa: &[Matrix],
    xb: Option<&[Matrix]>,
    pairs: &[(usize, usize)],
    spec: &KernelSpec,
    schedule: &MinibatchSchedule,
    row_labels: &[String],
    col_labels: &[String],
) -> Result<Vec<f64>> {
    spec.validate()?;
    let n = xa.first().map(|m| m.nrows()).unwrap_or(0);
    if schedule.n != n {
        return Err(Error::Consistency(format!(
            "schedule built for n = {} but archive has n = {n}",
            schedule.n
        )));
    }
    let kernels_for = |xs: &[Matrix], batch: &[usize]| -> Result<Vec<KernelMatrix>> {
        xs.par_iter()
            .map(|x| gram(&select_rows(x, batch), spec))
            .collect()
    };
    let self_terms = |ks: &[KernelMatrix]| -> Result<Vec<f64>> {
        ks.par_iter().map(|k| hsic1(k, k)).collect()
    };

    let mut accs = vec![CkaAccumulator::new(); pairs.len()];
    for batch in &schedule.batches {
        let ka = kernels_for(xa, batch)?;
        let kb_owned;
        let kb: &[KernelMatrix] = match xb {
            Some(xb) => {
                kb_owned = kernels_for(xb, batch)?;
                &kb_owned
            }
            None => &ka,
        };
        let sa = self_terms(&ka)?;
        let sb = match xb {
            Some(_) => self_terms(kb)?,
            None => sa.clone(),
        };
        let cross: Vec<f64> = pairs
            .par_iter()
            .map(|&(i, j)| if xb.is_none() && i == j { Ok(sa[i]) } else { hsic1(&ka[i], &kb[j]) })
            .collect::<Result<_>>()?;
        for ((acc, &(i, j)), xy) in accs.iter_mut().zip(pairs).zip(cross) {
            acc.add_terms(xy, sa[i], sb[j]);
        }
    }
    accs.iter()
        .zip(pairs)
        .map(|(acc, &(i, j))| {
            acc.finalize().map_err(|e| {
                Error::Degenerate(format!(
                    "CKA between `{}` and `{}`: {e}",
                    row_labels[i], col_labels[j]
                ))
            })
        })
        .collect()
}

/// Full-batch linear CKA of two column-centered matrices, evaluated through
/// their principal components:
/// `sum_ij lx_i ly_j <ux_i, uy_j>^2 / (sqrt(sum lx^2) sqrt(sum ly^2))`.
pub fn cka_pc_decomposition(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::Argument(format!(
            "row counts differ: {} vs {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::Argument("need at least 2 examples".into()));
    }
    let px = principal_components(x, x.nrows().min(x.ncols()))?;
    let py = principal_components(y, y.nrows().min(y.ncols()))?;
    let ux = px.components_matrix();
    let uy = py.components_matrix();
    // <ux_i, uy_j> for all i, j at once
    let overlaps = ux.transpose() * &uy;
    let mut num = 0.0;
    for (i, lx) in px.eigenvalues.iter().enumerate() {
        for (j, ly) in py.eigenvalues.iter().enumerate() {
            let c = overlaps[(i, j)];
            num += lx * ly * c * c;
        }
    }
    let nx = px.eigenvalues.iter().map(|l| l * l).sum::<f64>().sqrt();
    let ny = py.eigenvalues.iter().map(|l| l * l).sum::<f64>().sqrt();
    Ok(num / (nx * ny))
}
