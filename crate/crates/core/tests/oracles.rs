//! Checks against independent reference computations: brute-force
//! U-statistics, dense eigensolvers, direct Frobenius-form CKA and
//! exhaustive range enumeration.

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use repsim_core::blocks::detect_blocks;
use repsim_core::cka::{CkaHeatmap, Provenance};
use repsim_core::*;

fn gaussian(n: usize, p: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
}

fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let a = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    (&a + a.transpose()) * 0.5
}

fn km(values: Matrix) -> KernelMatrix {
    KernelMatrix {
        values,
        kind: KernelKind::Linear,
        bandwidth_sigma: None,
    }
}

/// U-statistic over ordered distinct quadruples with core
/// `K_ij L_ij + K_ij L_qr - 2 K_ij L_iq`.
fn hsic_u_statistic(k: &Matrix, l: &Matrix) -> f64 {
    let n = k.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            for q in 0..n {
                if q == i || q == j {
                    continue;
                }
                for r in 0..n {
                    if r == i || r == j || r == q {
                        continue;
                    }
                    sum += k[(i, j)] * l[(i, j)] + k[(i, j)] * l[(q, r)] - 2.0 * k[(i, j)] * l[(i, q)];
                }
            }
        }
    }
    let nf = n as f64;
    sum / (nf * (nf - 1.0) * (nf - 2.0) * (nf - 3.0))
}

/// Biased full-batch linear CKA, `‖YᵀX‖² / (‖XᵀX‖ ‖YᵀY‖)`.
fn direct_linear_cka(x: &Matrix, y: &Matrix) -> f64 {
    let xy = (y.transpose() * x).norm_squared();
    let xx = (x.transpose() * x).norm();
    let yy = (y.transpose() * y).norm();
    xy / (xx * yy)
}

fn top_eigenvalue(x: &Matrix) -> f64 {
    let cov = x.transpose() * x;
    SymmetricEigen::new(cov).eigenvalues.max()
}

fn random_orthogonal(p: usize, rng: &mut ChaCha8Rng) -> Matrix {
    gaussian(p, p, rng).qr().q()
}

#[test]
fn hsic1_matches_quadruple_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let k = random_symmetric(8, &mut rng);
        let l = random_symmetric(8, &mut rng);
        let fast = hsic1(&km(k.clone()), &km(l.clone())).unwrap();
        let slow = hsic_u_statistic(&k, &l);
        assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
    }
}

#[test]
fn hsic1_independent_grams_are_small() {
    let mut ratios = Vec::new();
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let k = gram_linear(&gaussian(64, 8, &mut rng));
        let l = gram_linear(&gaussian(64, 8, &mut rng));
        let cross = hsic1(&k, &l).unwrap();
        let selfk = hsic1(&k, &k).unwrap();
        ratios.push((cross / selfk).abs());
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!(mean < 0.1, "mean |ratio| {mean}");
}

#[test]
fn minibatch_converges_to_full_batch() {
    // 10 epochs at batch 256 against the biased full-batch value
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = gaussian(1024, 32, &mut rng);
    let mix = gaussian(32, 24, &mut rng);
    let y = &x * mix + gaussian(1024, 24, &mut rng) * 2.0;
    let s = make_schedule(1024, 256, 10, 3).unwrap();
    let mb = minibatch_cka(&x, &y, &KernelSpec::linear(), &s).unwrap();
    let full = direct_linear_cka(&center_columns(&x), &center_columns(&y));
    assert!((mb - full).abs() < 0.02, "{mb} vs {full}");
}

#[test]
fn orthogonal_invariance_of_minibatch_cka() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = gaussian(200, 10, &mut rng);
    let q = random_orthogonal(10, &mut rng);
    let s = make_schedule(200, 50, 2, 1).unwrap();
    let v = minibatch_cka(&x, &(&x * q), &KernelSpec::linear(), &s).unwrap();
    assert!((v - 1.0).abs() < 1e-8);
}

#[test]
fn pc_decomposition_matches_direct_cka() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let x = center_columns(&gaussian(64, 10, &mut rng));
        let y = center_columns(&gaussian(64, 12, &mut rng));
        let a = cka_pc_decomposition(&x, &y).unwrap();
        let b = direct_linear_cka(&x, &y);
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn pc_decomposition_rank_one_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let ux = center_columns(&gaussian(40, 1, &mut rng));
        let uy = center_columns(&gaussian(40, 1, &mut rng));
        let x = &ux * gaussian(1, 6, &mut rng);
        let y = &uy * gaussian(1, 9, &mut rng);
        let cos2 = pc_cosine_similarity(ux.as_slice(), uy.as_slice()).unwrap();
        let v = cka_pc_decomposition(&x, &y).unwrap();
        assert!((v - cos2).abs() < 1e-10, "{v} vs {cos2}");
    }
}

#[test]
fn eigenvalues_match_dense_eigensolver() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = center_columns(&gaussian(64, 32, &mut rng));
    let s = principal_components(&x, 32).unwrap();
    let mut eig: Vec<f64> = SymmetricEigen::new(x.transpose() * &x)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    for (a, b) in s.eigenvalues.iter().zip(&eig) {
        assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0), "{a} vs {b}");
    }
    let total: f64 = s.eigenvalues.iter().sum();
    assert!((total - x.norm_squared()).abs() < 1e-8 * total);
    for i in 0..32 {
        for j in 0..32 {
            let d: f64 = s.components_example_space[i]
                .iter()
                .zip(&s.components_example_space[j])
                .map(|(a, b)| a * b)
                .sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((d - expect).abs() < 1e-8);
        }
    }
}

#[test]
fn remove_first_pc_against_eigensolver() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = center_columns(&gaussian(50, 8, &mut rng));
    let s = principal_components(&x, 2).unwrap();
    let r = remove_first_pc(&x, &s);
    assert!((top_eigenvalue(&r) - s.eigenvalues[1]).abs() < 1e-8);
    // orthogonal to the removed component in the trace inner product
    let proj = project_first_pc(&x, &s);
    let mut inner = 0.0;
    for i in 0..50 {
        for j in 0..8 {
            inner += r[(i, j)] * proj[i] * s.directions[0][j];
        }
    }
    assert!(inner.abs() < 1e-8);
}

#[test]
fn power_iteration_converges_monotonically() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = center_columns(&gaussian(64, 32, &mut rng));
    let truth = top_eigenvalue(&x);
    let mut state = PowerIterState::random(32, &mut rng);
    let mut prev = 0.0;
    for _ in 0..200 {
        state = power_iteration_step(&x, &state).unwrap();
        assert!(state.lambda >= prev - 1e-12);
        prev = state.lambda;
    }
    assert!((state.lambda - truth).abs() / truth < 1e-6);
}

fn heatmap(l: usize, values: Vec<f64>) -> CkaHeatmap {
    let labels: Vec<String> = (0..l).map(|i| format!("l{i}")).collect();
    CkaHeatmap {
        row_labels: labels.clone(),
        col_labels: labels,
        values,
        kernel: KernelSpec::linear(),
        batch_size: 4,
        epochs: 1,
        seed: 0,
        provenance: Provenance::default(),
    }
}

/// Every contiguous range meeting the criterion, by brute force, then the
/// leftmost-longest disjoint selection.
fn blocks_by_enumeration(h: &CkaHeatmap, threshold: f64, min_size: usize) -> Vec<(usize, usize)> {
    let l = h.rows();
    let valid = |s: usize, e: usize| {
        for i in s..=e {
            for j in s..=e {
                if i != j && h.get(i, j) <= threshold {
                    return false;
                }
            }
        }
        true
    };
    let mut out = Vec::new();
    let mut s = 0;
    while s < l {
        let best = (s..l).filter(|&e| e + 1 - s >= min_size && valid(s, e)).max();
        match best {
            Some(e) => {
                out.push((s, e));
                s = e + 1;
            }
            None => s += 1,
        }
    }
    out
}

#[test]
fn block_detection_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let l = rng.gen_range(2..=64);
        // noisy banded heatmaps produce a mix of valid and broken ranges
        let width = rng.gen_range(1.0..20.0);
        let mut v = vec![0.0; l * l];
        for i in 0..l {
            for j in i..l {
                let base = (-((j - i) as f64) / width).exp();
                let val = if i == j { 1.0 } else { (base + rng.gen_range(-0.05..0.05)).min(1.0) };
                v[i * l + j] = val;
                v[j * l + i] = val;
            }
        }
        let h = heatmap(l, v);
        for (threshold, min_size) in [(0.95, 2), (0.9, 4), (0.8, 3)] {
            let got: Vec<(usize, usize)> = detect_blocks(&h, threshold, min_size)
                .unwrap()
                .iter()
                .map(|b| (b.start_layer, b.end_layer))
                .collect();
            assert_eq!(got, blocks_by_enumeration(&h, threshold, min_size));
            for w in got.windows(2) {
                assert!(w[0].1 < w[1].0);
            }
        }
    }
}
