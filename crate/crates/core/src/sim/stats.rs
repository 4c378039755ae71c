//! Binomial confidence bounds for the statistical checks.

use serde::{Deserialize, Serialize};

/// Standard normal quantile at 0.99.
pub const Z_99: f64 = 2.326_347_874_040_841;

/// Wilson score bounds on a success probability at one-sided confidence
/// level given by the normal quantile `z`.
pub fn wilson_bounds(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinomialEstimate {
    pub successes: u64,
    pub trials: u64,
    pub frequency: f64,
    /// One-sided 99% lower bound.
    pub lower_99: f64,
    /// One-sided 99% upper bound.
    pub upper_99: f64,
}

impl BinomialEstimate {
    pub fn new(successes: u64, trials: u64) -> Self {
        let (lower_99, upper_99) = wilson_bounds(successes, trials, Z_99);
        let frequency = if trials == 0 { f64::NAN } else { successes as f64 / trials as f64 };
        Self { successes, trials, frequency, lower_99, upper_99 }
    }

    /// The success probability exceeds `threshold` at 99% one-sided confidence.
    pub fn exceeds(&self, threshold: f64) -> bool {
        self.trials > 0 && self.lower_99 >= threshold
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_successes() {
        let e = BinomialEstimate::new(2000, 2000);
        assert_eq!(e.frequency, 1.0);
        assert!((e.lower_99 - 2000.0 / (2000.0 + Z_99 * Z_99)).abs() < 1e-12);
        assert!(e.exceeds(0.99));
    }

    #[test]
    fn bounds_bracket_frequency() {
        let e = BinomialEstimate::new(870, 1000);
        assert!(e.lower_99 < 0.87 && 0.87 < e.upper_99);
        assert!(e.exceeds(0.84) && !e.exceeds(0.86));
        assert!(!BinomialEstimate::new(0, 0).exceeds(0.0));
    }
}
