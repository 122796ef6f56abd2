//! Minibatch kernel (Gram) matrices.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{median, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Cosine,
    Rbf,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Linear => "linear",
            KernelKind::Cosine => "cosine",
            KernelKind::Rbf => "rbf",
        })
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(KernelKind::Linear),
            "cosine" => Ok(KernelKind::Cosine),
            "rbf" => Ok(KernelKind::Rbf),
            other => Err(Error::Argument(format!("unknown kernel `{other}`"))),
        }
    }
}

/// Kernel choice. For RBF, `rbf_c` is the bandwidth as a fraction of the
/// per-batch median pairwise distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub rbf_c: Option<f64>,
}

impl KernelSpec {
    pub const fn linear() -> Self {
        Self {
            kind: KernelKind::Linear,
            rbf_c: None,
        }
    }

    pub const fn cosine() -> Self {
        Self {
            kind: KernelKind::Cosine,
            rbf_c: None,
        }
    }

    pub fn rbf(c: f64) -> Result<Self> {
        let spec = Self {
            kind: KernelKind::Rbf,
            rbf_c: Some(c),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.rbf_c) {
            (KernelKind::Rbf, Some(c)) if c > 0.0 && c.is_finite() => Ok(()),
            (KernelKind::Rbf, Some(c)) => Err(Error::Argument(format!(
                "rbf bandwidth fraction must be positive, got {c}"
            ))),
            (KernelKind::Rbf, None) => Err(Error::Argument("rbf kernel needs rbf_c".into())),
            (_, None) => Ok(()),
            (kind, Some(_)) => Err(Error::Argument(format!("rbf_c given for {kind} kernel"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub values: Matrix,
    pub kind: KernelKind,
    pub bandwidth_sigma: Option<f64>,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }
}

/// Builds the kernel matrix selected by `spec`.
pub fn gram(x: &Matrix, spec: &KernelSpec) -> Result<KernelMatrix> {
    spec.validate()?;
    match spec.kind {
        KernelKind::Linear => Ok(gram_linear(x)),
        KernelKind::Cosine => Ok(gram_cosine(x)),
        KernelKind::Rbf => gram_rbf(x, spec.rbf_c.expect("validated")),
    }
}

/// `X Xᵀ`.
pub fn gram_linear(x: &Matrix) -> KernelMatrix {
    let xt = x.transpose();
    KernelMatrix {
        values: symmetric_from(x.nrows(), |i, j| dot_rows(&xt, i, j)),
        kind: KernelKind::Linear,
        bandwidth_sigma: None,
    }
}

/// Normalized dot products. Zero-norm rows get similarity 0 with every
/// row, themselves included.
pub fn gram_cosine(x: &Matrix) -> KernelMatrix {
    let xt = x.transpose();
    let norms: Vec<f64> = (0..x.nrows()).map(|i| dot_rows(&xt, i, i).sqrt()).collect();
    let values = symmetric_from(x.nrows(), |i, j| {
        if norms[i] == 0.0 || norms[j] == 0.0 {
            0.0
        } else if i == j {
            1.0
        } else {
            (dot_rows(&xt, i, j) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
        }
    });
    KernelMatrix {
        values,
        kind: KernelKind::Cosine,
        bandwidth_sigma: None,
    }
}

/// Median Euclidean distance over all distinct pairs of rows.
pub fn median_pairwise_distance(x: &Matrix) -> Result<f64> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Argument(format!(
            "median distance needs at least 2 examples, got {n}"
        )));
    }
    let xt = x.transpose();
    let xt = &xt;
    let dists: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| (i + 1..n).map(move |j| sq_dist_rows(xt, i, j).sqrt()))
        .collect();
    let med = median(&dists).expect("n >= 2");
    if med <= 0.0 {
        return Err(Error::Degenerate(
            "median pairwise distance is zero; rbf bandwidth undefined".into(),
        ));
    }
    Ok(med)
}

/// Gaussian kernel with `sigma = c * median_pairwise_distance(x)`.
pub fn gram_rbf(x: &Matrix, c: f64) -> Result<KernelMatrix> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Argument(format!("rbf c must be positive, got {c}")));
    }
    let sigma = c * median_pairwise_distance(x)?;
    Ok(gram_rbf_sigma(x, sigma))
}

/// Gaussian kernel with an explicit bandwidth.
pub fn gram_rbf_sigma(x: &Matrix, sigma: f64) -> KernelMatrix {
    let denom = 2.0 * sigma * sigma;
    let xt = x.transpose();
    let values = symmetric_from(x.nrows(), |i, j| {
        if i == j {
            1.0
        } else {
            (-sq_dist_rows(&xt, i, j) / denom).exp()
        }
    });
    KernelMatrix {
        values,
        kind: KernelKind::Rbf,
        bandwidth_sigma: Some(sigma),
    }
}

// Row helpers take the transposed matrix so each example is a contiguous
// column slice.
fn dot_rows(xt: &Matrix, i: usize, j: usize) -> f64 {
    let (a, b) = (xt.column(i), xt.column(j));
    let mut s = 0.0;
    for (u, v) in a.iter().zip(b.iter()) {
        s += u * v;
    }
    s
}

fn sq_dist_rows(xt: &Matrix, i: usize, j: usize) -> f64 {
    let (a, b) = (xt.column(i), xt.column(j));
    let mut s = 0.0;
    for (u, v) in a.iter().zip(b.iter()) {
        let d = u - v;
        s += d * d;
    }
    s
}

/// Fills the upper triangle in parallel (one task per row) and mirrors it,
/// so the result is exactly symmetric regardless of the thread split.
fn symmetric_from<F>(n: usize, f: F) -> Matrix
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| f(i, j)).collect())
        .collect();
    let mut m = Matrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            let j = i + off;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}
