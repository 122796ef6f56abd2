//! Principal components of centered activation matrices and the
//! single-step power iteration used by the first-PC regularizer.
//!
//! Components come from the eigendecomposition of the smaller of `XXᵀ` and
//! `XᵀX`. Each component is oriented so that its largest-magnitude
//! example-space entry is positive (earliest index wins ties); when
//! eigenvalues tie, their order is whatever the eigensolver returns.

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{frobenius_sq, Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcSummary {
    /// Variance amounts `λ¹ ≥ λ² ≥ ...` (squared singular values).
    pub eigenvalues: Vec<f64>,
    /// Unit example-space components `u¹, u², ...` (length n each).
    pub components_example_space: Vec<Vec<f64>>,
    /// Unit feature-space directions matching each component (length p).
    pub directions: Vec<Vec<f64>>,
    /// `‖X‖_F²`, the sum of all eigenvalues including the untracked ones.
    pub total_variance: f64,
    /// `λ¹ / ‖X‖_F²`.
    pub frac_first: f64,
}

impl PcSummary {
    /// Example-space components as columns of an `n x k` matrix.
    pub fn components_matrix(&self) -> Matrix {
        let n = self.components_example_space.first().map_or(0, Vec::len);
        let k = self.components_example_space.len();
        Matrix::from_fn(n, k, |i, j| self.components_example_space[j][i])
    }

    /// Fraction of total variance carried by each tracked component.
    pub fn variance_fractions(&self) -> Vec<f64> {
        self.eigenvalues
            .iter()
            .map(|l| l / self.total_variance)
            .collect()
    }

    /// JSON with eigenvalues and fractions; components are optional since
    /// they scale with the example count.
    pub fn to_json(&self, include_components: bool) -> serde_json::Value {
        let mut v = serde_json::json!({
            "eigenvalues": self.eigenvalues,
            "variance_fractions": self.variance_fractions(),
            "frac_first": self.frac_first,
            "total_variance": self.total_variance,
        });
        if include_components {
            v["components_example_space"] = serde_json::json!(self.components_example_space);
        }
        v
    }
}

/// Top-`k` principal components of a column-centered `n x p` matrix.
pub fn principal_components(x: &Matrix, k: usize) -> Result<PcSummary> {
    let (n, p) = x.shape();
    let max_k = n.min(p);
    if k == 0 || k > max_k {
        return Err(Error::Argument(format!(
            "requested {k} components from a {n}x{p} matrix (allowed 1..={max_k})"
        )));
    }
    let total = frobenius_sq(x);
    if !(total > 0.0) {
        return Err(Error::Degenerate("matrix has zero variance".into()));
    }
    // Eigendecomposition of the smaller Gram matrix. The SVD route loses
    // accuracy on exactly rank-deficient input, which every centered
    // matrix with n <= p is.
    let example_side = n <= p;
    let gram = if example_side { x * x.transpose() } else { x.tr_mul(x) };
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let negligible = top * n.max(p) as f64 * f64::EPSILON;

    let mut eigenvalues = Vec::with_capacity(k);
    let mut components: Vec<Vector> = Vec::with_capacity(k);
    let mut directions: Vec<Vector> = Vec::with_capacity(k);
    let mut degenerate = Vec::new();
    for &idx in order.iter().take(k) {
        let l = eig.eigenvalues[idx].max(0.0);
        let side: Vector = eig.eigenvectors.column(idx).into_owned();
        // the other side is X·v/√λ (or Xᵀ·u/√λ); undefined for zero variance
        let other = if l > negligible {
            Some(if example_side { x.tr_mul(&side) } else { x * &side } / l.sqrt())
        } else {
            None
        };
        let (comp, dir) = if example_side { (Some(side), other) } else { (other, Some(side)) };
        if comp.is_none() || dir.is_none() {
            degenerate.push(eigenvalues.len());
        }
        eigenvalues.push(l);
        components.push(comp.unwrap_or_else(|| Vector::zeros(n)));
        directions.push(dir.unwrap_or_else(|| Vector::zeros(p)));
    }
    for &i in &degenerate {
        if components[i].iter().all(|&v| v == 0.0) {
            components[i] = orthonormal_completion(&components, i, n);
        }
        if directions[i].iter().all(|&v| v == 0.0) {
            directions[i] = orthonormal_completion(&directions, i, p);
        }
    }
    let mut comps_out = Vec::with_capacity(k);
    let mut dirs_out = Vec::with_capacity(k);
    for (c, d) in components.into_iter().zip(directions) {
        let mut comp: Vec<f64> = c.iter().copied().collect();
        let mut dir: Vec<f64> = d.iter().copied().collect();
        if orientation(&comp) < 0.0 {
            comp.iter_mut().for_each(|v| *v = -*v);
            dir.iter_mut().for_each(|v| *v = -*v);
        }
        comps_out.push(comp);
        dirs_out.push(dir);
    }
    let (components, directions) = (comps_out, dirs_out);
    let frac_first = (eigenvalues[0] / total).clamp(0.0, 1.0);
    Ok(PcSummary {
        eigenvalues,
        components_example_space: components,
        directions,
        total_variance: total,
        frac_first,
    })
}

/// First standard basis vector, Gram-Schmidt orthogonalized against the
/// nonzero vectors in `others` (skipping index `skip`), that survives.
fn orthonormal_completion(others: &[Vector], skip: usize, dim: usize) -> Vector {
    for e in 0..dim {
        let mut v = Vector::zeros(dim);
        v[e] = 1.0;
        // two passes keep the result orthogonal to working precision
        for _ in 0..2 {
            for (j, o) in others.iter().enumerate() {
                if j != skip && o.iter().any(|&a| a != 0.0) {
                    let d = o.dot(&v);
                    v -= o * d;
                }
            }
        }
        let norm = v.norm();
        if norm > 0.5 {
            return v / norm;
        }
    }
    Vector::zeros(dim)
}

/// Sign of the largest-magnitude entry (first one on ties).
fn orientation(v: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for &x in v {
        if x.abs() > best.abs() {
            best = x;
        }
    }
    if best < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// `λ¹ / ‖X‖_F²` for a centered matrix.
pub fn frac_first(x: &Matrix) -> Result<f64> {
    Ok(principal_components(x, 1)?.frac_first)
}

/// Projection of each example onto the first PC direction in feature
/// space (equivalently `√λ¹ · u¹`).
pub fn project_first_pc(x: &Matrix, summary: &PcSummary) -> Vec<f64> {
    project_onto(x, &summary.directions[0])
}

/// Projections onto the `i`-th direction.
pub fn project_pc(x: &Matrix, summary: &PcSummary, i: usize) -> Vec<f64> {
    project_onto(x, &summary.directions[i])
}

fn project_onto(x: &Matrix, dir: &[f64]) -> Vec<f64> {
    x.row_iter()
        .map(|r| r.iter().zip(dir).map(|(a, b)| a * b).sum())
        .collect()
}

/// Squared cosine similarity `⟨a,b⟩² / (‖a‖²‖b‖²)`; sign-invariant.
pub fn pc_cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let aa: f64 = a.iter().map(|v| v * v).sum();
    let bb: f64 = b.iter().map(|v| v * v).sum();
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Argument("zero vector has no direction".into()));
    }
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((ab * ab / (aa * bb)).min(1.0))
}

/// `X` minus its rank-1 reconstruction along the first PC.
pub fn remove_first_pc(x: &Matrix, summary: &PcSummary) -> Matrix {
    let dir = &summary.directions[0];
    let proj = project_onto(x, dir);
    let mut out = x.clone();
    for (i, pi) in proj.iter().enumerate() {
        for (j, dj) in dir.iter().enumerate() {
            out[(i, j)] -= pi * dj;
        }
    }
    out
}

/// Stored eigenvector and eigenvalue estimate for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerIterState {
    pub u: Vector,
    pub lambda: f64,
}

impl PowerIterState {
    /// Uniform direction on the unit sphere (normalized Gaussian draw).
    pub fn random(p: usize, rng: &mut impl Rng) -> Self {
        loop {
            let u = Vector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let norm = u.norm();
            if norm > 0.0 {
                return Self {
                    u: u / norm,
                    lambda: 0.0,
                };
            }
        }
    }

    pub fn from_vector(u: Vector) -> Result<Self> {
        let norm = u.norm();
        if !(norm > 0.0) {
            return Err(Error::Argument("initial vector must be nonzero".into()));
        }
        Ok(Self {
            u: u / norm,
            lambda: 0.0,
        })
    }
}

/// One step: `v = XᵀX u`, `λ = ‖v‖`, `u' = v / λ`.
///
/// Returns [`Error::PowerIterationRestart`] when `v` vanishes.
pub fn power_iteration_step(x: &Matrix, state: &PowerIterState) -> Result<PowerIterState> {
    if x.ncols() != state.u.len() {
        return Err(Error::Argument(format!(
            "state has dimension {} but matrix has {} columns",
            state.u.len(),
            x.ncols()
        )));
    }
    let xu = x * &state.u;
    let v = x.tr_mul(&xu);
    let lambda = v.norm();
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::PowerIterationRestart);
    }
    Ok(PowerIterState { u: v / lambda, lambda })
}
