//! Ground-truth plant `x⁺ = A x + B u + w`, `w ~ N(0, W)`.
//!
//! Noise is drawn as `F g` with `F Fᵀ = W` and `g` standard normal. `F` is the
//! Cholesky factor when `W` is positive definite and the symmetric square
//! root `Q Λ^{1/2}` otherwise. Standard normals come from the ziggurat
//! sampler of `rand_distr` driven by a ChaCha8 stream, so a seed fixes the
//! trajectory.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_finite, Error, Result};
use crate::sim::rng_stream;
use crate::types::{LtiModel, NoiseSpec};

/// Stream index of the process-noise generator.
pub const NOISE_STREAM: u64 = 0;

#[derive(Debug, Clone)]
pub struct Plant {
    model: LtiModel,
    noise: NoiseSpec,
    noise_factor: DMatrix<f64>,
    x: DVector<f64>,
    k: usize,
    rng: ChaCha8Rng,
}

/// `F` with `F Fᵀ = W` for symmetric positive semi-definite `W`.
pub fn noise_factor(w: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = Cholesky::new(w.clone()) {
        return chol.l();
    }
    let eig = w.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

impl Plant {
    pub fn new(model: LtiModel, noise: NoiseSpec, x0: DVector<f64>, seed: u64) -> Result<Self> {
        if noise.dim() != model.n() || x0.len() != model.n() {
            return Err(Error::Dimension(format!(
                "plant has n={}, noise dimension {}, initial state {}",
                model.n(),
                noise.dim(),
                x0.len()
            )));
        }
        ensure_finite(x0.as_slice(), "initial state")?;
        let noise_factor = noise_factor(noise.covariance());
        Ok(Self { model, noise, noise_factor, x: x0, k: 0, rng: rng_stream(seed, NOISE_STREAM) })
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn model(&self) -> &LtiModel {
        &self.model
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.noise_factor
    }

    /// One draw of `w`.
    pub fn sample_noise(&mut self) -> DVector<f64> {
        let n = self.model.n();
        let g = DVector::from_fn(n, |_, _| self.rng.sample::<f64, _>(StandardNormal));
        &self.noise_factor * g
    }

    pub fn step(&mut self, u: &DVector<f64>) -> Result<&DVector<f64>> {
        if u.len() != self.model.m() {
            return Err(Error::Dimension(format!("input has {} entries, plant has m={}", u.len(), self.model.m())));
        }
        ensure_finite(u.as_slice(), "plant input")?;
        let w = self.sample_noise();
        self.x = self.model.predict(&self.x, u) + w;
        self.k += 1;
        Ok(&self.x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, b: f64, w: f64, x0: f64) -> Plant {
        let model = LtiModel::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b)).unwrap();
        let noise = NoiseSpec::new(DMatrix::from_element(1, 1, w), w.max(1e-12)).unwrap();
        Plant::new(model, noise, DVector::from_element(1, x0), 1).unwrap()
    }

    #[test]
    fn noiseless_identity_holds_state() {
        let mut p = scalar(1.0, 0.0, 0.0, 1.0);
        for _ in 0..100 {
            assert_eq!(p.step(&DVector::from_element(1, 3.0)).unwrap()[0], 1.0);
        }
        assert_eq!(p.k(), 100);
    }

    #[test]
    fn noiseless_one_step() {
        let mut p = scalar(0.5, 1.0, 0.0, 1.0);
        assert_eq!(p.step(&DVector::from_element(1, 1.0)).unwrap()[0], 1.5);
    }

    #[test]
    fn unit_noise_moments() {
        let mut p = scalar(0.0, 0.0, 1.0, 0.0);
        let draws: Vec<f64> = (0..100_000).map(|_| p.step(&DVector::zeros(1)).unwrap()[0]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "variance {var}");
    }

    #[test]
    fn rejects_bad_input() {
        let mut p = scalar(0.5, 1.0, 0.0, 1.0);
        assert!(p.step(&DVector::from_element(1, f64::INFINITY)).is_err());
        assert!(p.step(&DVector::zeros(2)).is_err());
    }

    #[test]
    fn factor_reproduces_covariance() {
        let full = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        for w in [full, singular, DMatrix::zeros(2, 2)] {
            let f = noise_factor(&w);
            assert!((&f * f.transpose() - &w).amax() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let model = LtiModel::new(DMatrix::identity(2, 2) * 0.9, DMatrix::from_element(2, 1, 1.0)).unwrap();
        let noise = NoiseSpec::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]), 2.0).unwrap();
        let run = |seed| {
            let mut p = Plant::new(model.clone(), noise.clone(), DVector::zeros(2), seed).unwrap();
            (0..50).map(|t| p.step(&DVector::from_element(1, t as f64 * 0.1)).unwrap().clone()).collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }
}
