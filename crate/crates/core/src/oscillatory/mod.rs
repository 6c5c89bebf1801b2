//! Stationary phase apparatus for the sphere-pair surface measure
//! `σ_α` on `{(x, y) : |x| = |y| = 1, x·y = cos α}`: the local
//! parametrization and its phase, estimators of `σ̂_α`, and scaling probes.

mod phase;
mod probes;
mod sigma;

pub use phase::*;
pub use probes::*;
pub use sigma::*;

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::MeasureError;
use crate::numeric::{angle_between, norm, FitError};

#[derive(Debug, Error)]
pub enum OscError {
    #[error("alpha = {0} outside the allowed range")]
    InvalidAlpha(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("critical equations violated: residual {0}")]
    CriticalEquationsViolated(f64),
    #[error("Hessian determinant mismatch: direct {direct}, closed form {closed}")]
    HessianMismatch { direct: f64, closed: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("insufficient data: {got} usable points, need {needed}")]
    InsufficientData { needed: usize, got: usize },
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

pub(crate) fn check_acute(alpha: f64) -> Result<(), OscError> {
    if alpha > 0.0 && alpha < FRAC_PI_2 {
        Ok(())
    } else {
        Err(OscError::InvalidAlpha(alpha))
    }
}

/// Dual variables `(ξ, η)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPair {
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
}

impl FrequencyPair {
    pub fn new(xi: Vec<f64>, eta: Vec<f64>) -> Result<Self, OscError> {
        if xi.len() != eta.len() || xi.len() < 2 {
            return Err(OscError::InvalidInput(format!(
                "xi and eta must share a dimension >= 2 (got {} and {})",
                xi.len(),
                eta.len()
            )));
        }
        if xi.iter().chain(&eta).any(|v| !v.is_finite()) {
            return Err(OscError::InvalidInput("non-finite frequency".into()));
        }
        Ok(Self { xi, eta })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            xi: vec![0.0; dim],
            eta: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.xi.len()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            xi: self.xi.iter().map(|v| v * s).collect(),
            eta: self.eta.iter().map(|v| v * s).collect(),
        }
    }

    pub fn negated(&self) -> Self {
        self.scaled(-1.0)
    }

    /// `ξ'` and `η'`: the middle `d − 2` coordinates.
    pub fn xi_prime(&self) -> &[f64] {
        &self.xi[1..self.dim() - 1]
    }

    pub fn eta_prime(&self) -> &[f64] {
        &self.eta[1..self.dim() - 1]
    }
}

/// Rotation by `α` in the `(e₁, e_d)` plane, identity on the other axes:
/// `(η₁, η_d) ↦ (cos α η₁ − sin α η_d, sin α η₁ + cos α η_d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationBlock {
    pub alpha: f64,
}

impl RotationBlock {
    pub fn new(alpha: f64) -> Result<Self, OscError> {
        check_acute(alpha)?;
        Ok(Self { alpha })
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let (s, c) = self.alpha.sin_cos();
        let d = v.len();
        let mut out = v.to_vec();
        out[0] = c * v[0] - s * v[d - 1];
        out[d - 1] = s * v[0] + c * v[d - 1];
        out
    }

    /// Inverse rotation (the transpose).
    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        Self { alpha: -self.alpha }.apply(v)
    }

    pub fn matrix(&self, dim: usize) -> Vec<Vec<f64>> {
        let cols: Vec<Vec<f64>> = (0..dim)
            .map(|j| {
                let mut e = vec![0.0; dim];
                e[j] = 1.0;
                self.apply(&e)
            })
            .collect();
        (0..dim).map(|i| (0..dim).map(|j| cols[j][i]).collect()).collect()
    }
}

/// Rotation-invariant distance to resonance: `min |ξ + g η|` over rotations
/// `g` by `α` in the plane spanned by `ξ` and `η`. Equals
/// `(|ξ|² + |η|² + 2|ξ||η| cos(θ + α))^{1/2}` with `θ = ∠(ξ, η)`.
pub fn resonance_distance(fp: &FrequencyPair, alpha: f64) -> f64 {
    let (a, b) = (norm(&fp.xi), norm(&fp.eta));
    let theta = angle_between(&fp.xi, &fp.eta).unwrap_or(0.0);
    (a * a + b * b + 2.0 * a * b * (theta + alpha).cos()).max(0.0).sqrt()
}

/// Right-hand side of the decay bound without its constant:
/// `|ξ + gη|^{-1/2} |ξ|^{-(d-2)/2} |η|^{-(d-2)/2} sin(∠(ξ, η))^{-(d-2)/2}`,
/// with the resonance distance in place of `|ξ + gη|`.
pub fn decay_bound(fp: &FrequencyPair, alpha: f64) -> f64 {
    let d = fp.dim() as f64;
    let h = 0.5 * (d - 2.0);
    let theta = angle_between(&fp.xi, &fp.eta).unwrap_or(0.0);
    resonance_distance(fp, alpha).powf(-0.5)
        * norm(&fp.xi).powf(-h)
        * norm(&fp.eta).powf(-h)
        * theta.sin().abs().powf(-h)
}

/// Prefactor `C₁(α) · max(t, r)^{-1/2} t^{d/2} r^{d/2}` of the tail estimate.
pub fn tail_prefactor(c1: f64, t: f64, r: f64, dim: usize) -> f64 {
    let h = dim as f64 / 2.0;
    c1 * t.max(r).powf(-0.5) * t.powf(h) * r.powf(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn rotation_block_is_orthogonal() {
        for alpha in [0.1, PI / 6.0, PI / 3.0, 1.5] {
            let g = RotationBlock::new(alpha).unwrap();
            for d in 2..=5 {
                let m = g.matrix(d);
                for i in 0..d {
                    for j in 0..d {
                        let dotp: f64 = (0..d).map(|k| m[k][i] * m[k][j]).sum();
                        let want = if i == j { 1.0 } else { 0.0 };
                        assert!((dotp - want).abs() < 1e-12);
                    }
                }
            }
        }
        assert!(RotationBlock::new(0.0).is_err());
        assert!(RotationBlock::new(FRAC_PI_2).is_err());
    }

    #[test]
    fn rotation_block_moves_base_points() {
        let alpha = PI / 3.0;
        let g = RotationBlock::new(alpha).unwrap();
        let x0 = [0.0, 0.0, 0.0, 1.0];
        let y0 = [alpha.sin(), 0.0, 0.0, alpha.cos()];
        // the stated component formula sends x⁰ to (−sin α, cos α); its inverse lands on y⁰
        let gx = g.apply(&x0);
        assert!((gx[0] + alpha.sin()).abs() < 1e-15);
        let back = g.apply_transpose(&x0);
        for k in 0..4 {
            assert!((back[k] - y0[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn identification_with_xi_plus_g_eta() {
        let alpha = 0.7;
        let g = RotationBlock::new(alpha).unwrap();
        let (s, c) = alpha.sin_cos();
        let xi = [0.3, 0.0, 0.0, -1.2];
        let eta = [2.0, 0.0, 0.0, 0.4];
        let ge = g.apply(&eta);
        let first = xi[0] + c * eta[0] - s * eta[3];
        let last = xi[3] + s * eta[0] + c * eta[3];
        assert!((xi[0] + ge[0] - first).abs() < 1e-12);
        assert!((xi[3] + ge[3] - last).abs() < 1e-12);
    }

    #[test]
    fn resonance_distance_vanishes_on_resonant_pairs() {
        let alpha = PI / 4.0;
        let g = RotationBlock::new(alpha).unwrap();
        let eta = vec![0.6, 0.0, 0.8];
        let xi: Vec<f64> = g.apply(&eta).iter().map(|v| -v).collect();
        let fp = FrequencyPair::new(xi, eta).unwrap();
        assert!(resonance_distance(&fp, alpha) < 1e-12);
        let generic = FrequencyPair::new(vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]).unwrap();
        assert!(resonance_distance(&generic, alpha) > 0.5);
    }

    #[test]
    fn tail_prefactor_is_symmetric() {
        for (t, r) in [(0.3, 0.7), (1.0, 2.0), (0.5, 0.5)] {
            assert_eq!(tail_prefactor(1.3, t, r, 4), tail_prefactor(1.3, r, t, 4));
        }
    }
}
