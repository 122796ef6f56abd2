//! Hinge penalty on the first-PC variance fraction of a layer.
//!
//! For a centered batch `X̃` and stored unit vector `u`:
//!
//! ```text
//! v = X̃ᵀX̃u,  λ = ‖v‖,  û = v/λ,  F = ‖X̃‖_F²
//! loss = α · max(λ/F − δ, 0)
//! ∂λ/∂X̃ = (X̃u)ûᵀ + (X̃û)uᵀ,   ∂F/∂X̃ = 2X̃
//! ```
//!
//! `u` is treated as a constant: no gradient flows through the stored
//! power-iteration history.

use repsim_core::matrix::frobenius_sq;
use repsim_core::{Error, Matrix, Vector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ToyError};

pub const DEFAULT_DELTA: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegConfig {
    pub alpha: f64,
    pub delta: f64,
    /// Hidden-layer indices (0-based) to regularize; `None` means every
    /// layer from `depth / 3` onward.
    pub regularized_layers: Option<Vec<usize>>,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            delta: DEFAULT_DELTA,
            regularized_layers: None,
        }
    }
}

impl RegConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(ToyError::Config("alpha must be nonnegative".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(ToyError::Config("delta must lie in (0, 1)".into()));
        }
        if let Some(layers) = &self.regularized_layers {
            if let Some(&bad) = layers.iter().find(|&&l| l >= depth) {
                return Err(ToyError::Config(format!(
                    "regularized layer {bad} out of range for depth {depth}"
                )));
            }
        }
        Ok(())
    }

    pub fn layers(&self, depth: usize) -> Vec<usize> {
        match &self.regularized_layers {
            Some(l) => {
                let mut l = l.clone();
                l.sort_unstable();
                l.dedup();
                l
            }
            None => default_regularized_layers(depth),
        }
    }
}

/// Layers `depth/3 .. depth`.
pub fn default_regularized_layers(depth: usize) -> Vec<usize> {
    (depth / 3..depth).collect()
}

/// `α · max(λ/‖X̃‖_F² − δ, 0)`.
pub fn pc_reg_loss(lambda: f64, x: &Matrix, alpha: f64, delta: f64) -> Result<f64> {
    let f = frobenius_sq(x);
    if !(f > 0.0) {
        return Err(Error::Degenerate("zero Frobenius norm".into()).into());
    }
    Ok(alpha * (lambda / f - delta).max(0.0))
}

/// Loss, gradient with respect to `X̃`, and the updated power-iteration
/// vector `û` for one layer.
#[derive(Debug, Clone)]
pub struct RegStep {
    pub lambda: f64,
    pub ratio: f64,
    pub loss: f64,
    pub grad: Matrix,
    pub next_u: Vector,
}

/// Evaluates the penalty and its gradient from the stored vector `u_prev`.
///
/// Returns [`Error::PowerIterationRestart`] (wrapped) when `X̃ᵀX̃u` vanishes.
pub fn pc_reg_step(x: &Matrix, u_prev: &Vector, alpha: f64, delta: f64) -> Result<RegStep> {
    let f = frobenius_sq(x);
    if !(f > 0.0) {
        return Err(Error::Degenerate("zero Frobenius norm".into()).into());
    }
    let xu = x * u_prev;
    let v = x.tr_mul(&xu);
    let lambda = v.norm();
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::PowerIterationRestart.into());
    }
    let u_hat = v / lambda;
    let ratio = lambda / f;
    let active = ratio > delta;
    let loss = alpha * (ratio - delta).max(0.0);
    let grad = if active {
        let xu_hat = x * &u_hat;
        let dlambda = &xu * u_hat.transpose() + xu_hat * u_prev.transpose();
        (dlambda / f - x * (2.0 * lambda / (f * f))) * alpha
    } else {
        Matrix::zeros(x.nrows(), x.ncols())
    };
    Ok(RegStep {
        lambda,
        ratio,
        loss,
        grad,
        next_u: u_hat,
    })
}

/// Gradient of the penalty with respect to `X̃` (zero when the hinge is off).
pub fn pc_reg_grad(x: &Matrix, u_prev: &Vector, alpha: f64, delta: f64) -> Result<Matrix> {
    Ok(pc_reg_step(x, u_prev, alpha, delta)?.grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_hand_values() {
        // ‖X‖² = 1 so λ is the ratio directly
        let x = Matrix::from_row_slice(1, 1, &[1.0]);
        assert_eq!(pc_reg_loss(0.15, &x, 1.0, 0.2).unwrap(), 0.0);
        assert!((pc_reg_loss(0.5, &x, 1.0, 0.2).unwrap() - 0.3).abs() < 1e-15);
        assert!((pc_reg_loss(0.25, &x, 10.0, 0.2).unwrap() - 0.5).abs() < 1e-14);
        assert!(pc_reg_loss(0.5, &Matrix::zeros(2, 2), 1.0, 0.2).is_err());
    }

    #[test]
    fn inactive_hinge_gives_zero_gradient() {
        // isotropic: ratio = 1/p = 0.125 < 0.2
        let x = Matrix::identity(8, 8);
        let u = Vector::from_element(8, 1.0 / 8f64.sqrt());
        let g = pc_reg_grad(&x, &u, 1.0, 0.2).unwrap();
        assert_eq!(g, Matrix::zeros(8, 8));
    }

    #[test]
    fn null_space_vector_signals_restart() {
        let x = Matrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        let u = Vector::from_vec(vec![0.0, 1.0]);
        assert!(matches!(
            pc_reg_grad(&x, &u, 1.0, 0.2),
            Err(ToyError::Analysis(Error::PowerIterationRestart))
        ));
    }

    #[test]
    fn default_layers_start_at_a_third() {
        assert_eq!(default_regularized_layers(12), (4..12).collect::<Vec<_>>());
        let cfg = RegConfig {
            regularized_layers: Some(vec![5, 2, 5]),
            ..Default::default()
        };
        assert_eq!(cfg.layers(12), vec![2, 5]);
        assert!(RegConfig { delta: 1.0, ..Default::default() }.validate(12).is_err());
        assert!(RegConfig { regularized_layers: Some(vec![12]), ..Default::default() }
            .validate(12)
            .is_err());
    }
}
