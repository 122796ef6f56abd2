//! Dense matrix helpers shared by the analysis modules.

pub type Matrix = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;

/// Subtracts each column's mean.
pub fn center_columns(x: &Matrix) -> Matrix {
    let n = x.nrows();
    let mut out = x.clone();
    if n == 0 {
        return out;
    }
    for mut col in out.column_iter_mut() {
        let mean = col.iter().sum::<f64>() / n as f64;
        col.iter_mut().for_each(|v| *v -= mean);
    }
    out
}

/// Rows of `x` at `indices`, in that order.
pub fn select_rows(x: &Matrix, indices: &[usize]) -> Matrix {
    Matrix::from_fn(indices.len(), x.ncols(), |i, j| x[(indices[i], j)])
}

/// Squared Frobenius norm.
pub fn frobenius_sq(x: &Matrix) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Euclidean norm of each row.
pub fn row_norms(x: &Matrix) -> Vec<f64> {
    x.row_iter().map(|r| r.norm()).collect()
}

/// Median with the mean of the two central values for even lengths.
/// Returns `None` for an empty slice.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    let mid = v.len() / 2;
    let (lo, upper, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let upper = *upper;
    if values.len() % 2 == 1 {
        Some(upper)
    } else {
        let lower = lo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(0.5 * (lower + upper))
    }
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn center_small() {
        let x = Matrix::from_row_slice(2, 1, &[1.0, 3.0]);
        let c = center_columns(&x);
        assert_eq!(c.as_slice(), &[-1.0, 1.0]);
    }

    #[test]
    fn center_is_idempotent_and_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::from_fn(256, 64, |_, _| rng.gen_range(-5.0..5.0) + 10.0);
        let c = center_columns(&x);
        for col in c.column_iter() {
            assert!(col.sum().abs() < 1e-4);
        }
        let cc = center_columns(&c);
        assert!((cc - &c).amax() < 1e-6);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn pearson_degenerate() {
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        let r = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }
}
