//! Long-run decay of the model-error radius `τ_k = ζ_k n β_k(δ/(2n))`.
//!
//! `τ_k` is evaluated at `x[k]` with the Gram matrix after `k` transitions.
//! Under persistent excitation it shrinks like `√(ln k / k)`; the curve is
//! compared against that rate at `k = 10²`, `10⁴` and `10⁵`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sim::harness::{ClosedLoop, ClosedLoopConfig};
use crate::sim::monte_carlo::POE_LOST_TOL;

/// `√(ln k / k)`, zero at `k = 1`.
pub fn rate(k: usize) -> f64 {
    let k = k as f64;
    (k.ln() / k).sqrt()
}

/// Largest allowed `τ_{10⁴}/τ_{10²}`: twice the rate ratio.
pub fn rate_ratio_bound() -> f64 {
    2.0 * rate(10_000) / rate(100)
}

/// Largest allowed `τ_{10⁵}/τ_{10²}`.
pub const TAIL_RATIO_BOUND: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    pub k: Vec<usize>,
    pub tau: Vec<f64>,
    /// Least-squares `c` in `τ_k ≈ c √(ln k / k)`, absent for fewer than two points.
    pub fit: Option<f64>,
    /// `τ_{10⁴}/τ_{10²}`, when the horizon reaches `10⁴`.
    pub rate_ratio: Option<f64>,
    pub rate_ratio_bound: f64,
    /// `τ_{10⁵}/τ_{10²}`, when the horizon reaches `10⁵`.
    pub tail_ratio: Option<f64>,
    pub tail_ratio_bound: f64,
    pub min_alpha: Option<f64>,
    pub poe_observed: bool,
    pub warnings: Vec<String>,
}

impl DecayReport {
    pub fn tau_at(&self, k: usize) -> Option<f64> {
        self.k.binary_search(&k).ok().map(|i| self.tau[i])
    }

    pub fn reference(&self, k: usize) -> Option<f64> {
        self.fit.map(|c| c * rate(k))
    }

    /// Both ratio checks were evaluated and hold.
    pub fn passes(&self) -> bool {
        matches!(self.rate_ratio, Some(r) if r <= self.rate_ratio_bound)
            && matches!(self.tail_ratio, Some(r) if r <= self.tail_ratio_bound)
    }
}

pub fn run_decay(config: &ClosedLoopConfig) -> Result<DecayReport> {
    if config.horizon == 0 {
        return Err(Error::InvalidParameter("decay horizon must be >= 1".into()));
    }
    let n = config.model.n();
    let mut sim = ClosedLoop::new(config)?;
    let mut k = Vec::with_capacity(config.horizon);
    let mut tau = Vec::with_capacity(config.horizon);
    let mut min_alpha: Option<f64> = None;
    let mut poe_lost = false;
    sim.step()?;
    for step in 1..=config.horizon {
        // Row `step` carries the uncertainty after `step` transitions.
        let row = sim.step()?;
        k.push(step);
        tau.push(row.tau(n));
        if sim.window().is_full() {
            min_alpha = Some(min_alpha.map_or(row.alpha_hat, |a| a.min(row.alpha_hat)));
            poe_lost |= row.alpha_hat <= POE_LOST_TOL * row.gamma_hat.max(1.0);
        }
    }

    let mut warnings = Vec::new();
    let poe_observed = min_alpha.is_some() && !poe_lost;
    if !poe_observed {
        warnings.push("PoE not observed: the excitation window lost rank or never filled".to_string());
    }
    let fit = if k.len() < 2 {
        warnings.push("single-point curve: no rate fit".to_string());
        None
    } else {
        let (num, den) = k.iter().zip(&tau).fold((0.0, 0.0), |(num, den), (&k, &t)| {
            let g = rate(k);
            (num + t * g, den + g * g)
        });
        Some(num / den)
    };

    let at = |step: usize| k.binary_search(&step).ok().map(|i| tau[i]);
    let ratio = |hi: usize| match (at(100), at(hi)) {
        (Some(lo), Some(hi)) if lo > 0.0 => Some(hi / lo),
        _ => None,
    };
    let rate_ratio = ratio(10_000);
    let tail_ratio = ratio(100_000);
    Ok(DecayReport {
        rate_ratio,
        rate_ratio_bound: rate_ratio_bound(),
        tail_ratio,
        tail_ratio_bound: TAIL_RATIO_BOUND,
        k,
        tau,
        fit,
        min_alpha,
        poe_observed,
        warnings,
    })
}
