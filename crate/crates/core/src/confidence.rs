//! Confidence radius of the ridge estimate and the input-dependent scale that
//! turns parameter uncertainty into one-step prediction uncertainty.
//!
//! For every state coordinate `i`, with probability at least `1 − δ`,
//! `‖V^{1/2}(θ̂_i − θ_i)‖₂ ≤ β(δ/n)` for all `i`, where
//!
//! ```text
//!     β(δ) = r √(2 log(det(V)^{1/2} / (λ^{d/2} δ))) + √λ s
//! ```
//!
//! and `d = n + m` is the dimension of `V`. The [`BetaExponent::StateDim`]
//! variant uses `d = n` instead, which only differs when `λ ≠ 1`.

use nalgebra::{Cholesky, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::stack;
use crate::types::InputSet;

/// Which dimension multiplies `log λ` in the confidence radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaExponent {
    /// `λ^{(n+m)/2}`: the determinant ratio is exactly one before any data.
    #[default]
    ParameterDim,
    /// `λ^{n/2}`, kept for comparison runs.
    StateDim,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceConfig {
    /// Sub-Gaussian noise parameter, `W ⪯ rI`.
    pub r: f64,
    /// Bound on `‖[A B]‖_F`.
    pub s: f64,
    pub lambda: f64,
    /// Per-step failure probability.
    pub delta: f64,
    pub n: usize,
    pub m: usize,
    pub exponent: BetaExponent,
}

impl ConfidenceConfig {
    pub fn new(r: f64, s: f64, lambda: f64, delta: f64, n: usize, m: usize) -> Result<Self> {
        let cfg = Self { r, s, lambda, delta, n, m, exponent: BetaExponent::ParameterDim };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_exponent(mut self, exponent: BetaExponent) -> Self {
        self.exponent = exponent;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("r", self.r), ("s", self.s), ("lambda", self.lambda)] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {value}")));
            }
        }
        check_probability(self.delta)?;
        if self.n == 0 || self.m == 0 {
            return Err(Error::Dimension(format!("n and m must be >= 1, got n={}, m={}", self.n, self.m)));
        }
        Ok(())
    }

    fn exponent_dim(&self) -> usize {
        match self.exponent {
            BetaExponent::ParameterDim => self.n + self.m,
            BetaExponent::StateDim => self.n,
        }
    }
}

fn check_probability(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("probability must lie in (0, 1), got {delta}")))
    }
}

/// Confidence radius `β(delta_arg)` for a Gram matrix with log-determinant
/// `logdet_v`.
pub fn beta(cfg: &ConfidenceConfig, logdet_v: f64, delta_arg: f64) -> Result<f64> {
    check_probability(delta_arg)?;
    let d = cfg.exponent_dim() as f64;
    let radicand = 2.0 * (0.5 * logdet_v - 0.5 * d * cfg.lambda.ln() - delta_arg.ln());
    Ok(cfg.r * radicand.max(0.0).sqrt() + cfg.lambda.sqrt() * cfg.s)
}

/// `‖V^{-1/2} z‖₂ = ‖L⁻¹ z‖₂` for `V = L Lᵀ`.
pub fn inverse_weighted_norm(chol: &Cholesky<f64, Dyn>, z: &DVector<f64>) -> f64 {
    chol.l_dirty()
        .solve_lower_triangular(z)
        .expect("Cholesky factor has a positive diagonal")
        .norm()
}

/// `‖V^{1/2} e‖₂ = ‖Lᵀ e‖₂` for `V = L Lᵀ`.
pub fn weighted_norm(chol: &Cholesky<f64, Dyn>, e: &DVector<f64>) -> f64 {
    (chol.l().transpose() * e).norm()
}

/// `ζ = max_{u ∈ U} ‖V^{-1/2}[x; u]‖₂`. The objective is convex in `u`, so the
/// maximum over a polytope is attained at one of its vertices.
pub fn zeta(chol: &Cholesky<f64, Dyn>, x: &DVector<f64>, input_set: &InputSet) -> Result<f64> {
    let d = chol.l_dirty().nrows();
    if x.len() + input_set.dim() != d {
        return Err(Error::Dimension(format!(
            "state ({}) plus input ({}) dimension does not match V ({d})",
            x.len(),
            input_set.dim()
        )));
    }
    Ok(input_set
        .vertices()?
        .iter()
        .map(|u| inverse_weighted_norm(chol, &stack(x, u)))
        .fold(0.0, f64::max))
}

/// Whether every row of the estimate lies in the confidence ellipsoid of the
/// truth: `‖V^{1/2}(θ̂_i − θ_i)‖₂ ≤ radius` for all `i`. `theta_hat` and
/// `theta_true` hold one row per column.
pub fn confidence_holds(
    theta_true: &nalgebra::DMatrix<f64>,
    theta_hat: &nalgebra::DMatrix<f64>,
    chol: &Cholesky<f64, Dyn>,
    radius: f64,
) -> bool {
    max_weighted_error(theta_true, theta_hat, chol) <= radius
}

pub fn max_weighted_error(
    theta_true: &nalgebra::DMatrix<f64>,
    theta_hat: &nalgebra::DMatrix<f64>,
    chol: &Cholesky<f64, Dyn>,
) -> f64 {
    theta_hat
        .column_iter()
        .zip(theta_true.column_iter())
        .map(|(est, truth)| weighted_norm(chol, &(est - truth)))
        .fold(0.0, f64::max)
}
