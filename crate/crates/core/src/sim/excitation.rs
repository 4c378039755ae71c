use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Additive perturbation of the nominal input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Excitation {
    #[default]
    None,
    /// Independent uniform draws on `[-amplitude, amplitude]`.
    UniformDither { amplitude: f64 },
    GaussianDither { sigma: f64 },
    /// Independent random signs scaled by `amplitude`.
    Prbs { amplitude: f64 },
}

impl Excitation {
    pub fn validate(&self) -> Result<()> {
        let level = match *self {
            Excitation::None => 0.0,
            Excitation::UniformDither { amplitude } | Excitation::Prbs { amplitude } => amplitude,
            Excitation::GaussianDither { sigma } => sigma,
        };
        if level >= 0.0 && level.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("excitation level must be nonnegative, got {level}")))
        }
    }

    pub fn is_trivial(&self) -> bool {
        match *self {
            Excitation::None => true,
            Excitation::UniformDither { amplitude } | Excitation::Prbs { amplitude } => amplitude == 0.0,
            Excitation::GaussianDither { sigma } => sigma == 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> DVector<f64> {
        match *self {
            Excitation::None => DVector::zeros(m),
            Excitation::UniformDither { amplitude } => {
                DVector::from_fn(m, |_, _| if amplitude > 0.0 { rng.random_range(-amplitude..=amplitude) } else { 0.0 })
            }
            Excitation::GaussianDither { sigma } => match Normal::new(0.0, sigma) {
                Ok(dist) => DVector::from_fn(m, |_, _| dist.sample(rng)),
                Err(_) => DVector::from_fn(m, |_, _| sigma * rng.sample::<f64, _>(StandardNormal)),
            },
            Excitation::Prbs { amplitude } => {
                DVector::from_fn(m, |_, _| if rng.random::<bool>() { amplitude } else { -amplitude })
            }
        }
    }
}
