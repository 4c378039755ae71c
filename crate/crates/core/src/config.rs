//! Experiment configuration, read from TOML.
//!
//! ```toml
//! [system]
//! a = [[0.9, 0.1], [0.0, 0.8]]
//! b = [[0.0], [1.0]]
//! w = [[0.01, 0.0], [0.0, 0.01]]
//! x0 = [0.0, 0.0]
//!
//! [assumptions]
//! r = 0.01
//! s = 2.0
//! lambda = 1.0
//!
//! [safety]
//! input_set = { kind = "box", lower = [-2.0], upper = [2.0] }
//! [[safety.schedule]]
//! h_mat = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
//! h = [5.0, 5.0, 5.0, 5.0]
//!
//! [filter]
//! delta = 0.2
//!
//! [run]
//! horizon = 100
//! ```
//!
//! Omitted blocks take their defaults: zero policy, no excitation, projection
//! filter, one run seeded 0.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::confidence::{BetaExponent, ConfidenceConfig};
use crate::error::{Error, Result};
use crate::filter::FilterOptions;
use crate::sim::excitation::Excitation;
use crate::sim::harness::{ClosedLoopConfig, FilterMode, NominalPolicy};
use crate::types::{Constraint, InputSet, LtiModel, NoiseSpec, SafetySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssumptionsBlock {
    /// Upper bound on the largest eigenvalue of `W`.
    pub r: f64,
    /// Upper bound on `‖[A B]‖_F`.
    pub s: f64,
    /// Ridge regularization.
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintBlock {
    pub h_mat: Vec<Vec<f64>>,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyBlock {
    pub input_set: InputSet,
    /// `(H[k], h[k])` for `k = 0, 1, …`; the last entry repeats.
    pub schedule: Vec<ConstraintBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterBlock {
    pub delta: f64,
    #[serde(default)]
    pub mode: FilterMode,
    /// Use the state dimension `n` instead of `n + m` in the log-determinant
    /// prior term of `β`.
    #[serde(default)]
    pub strict_paper_beta: bool,
    /// Drop the model term once it falls below `noise_only_threshold` times
    /// the noise term.
    #[serde(default)]
    pub noise_only_switch: bool,
    #[serde(default = "default_noise_only_threshold")]
    pub noise_only_threshold: f64,
}

fn default_noise_only_threshold() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    pub horizon: usize,
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_poe_window")]
    pub poe_window: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayBlock {
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyBlock {
    #[serde(default = "default_suite_runs")]
    pub coverage_runs: usize,
    #[serde(default = "default_coverage_horizon")]
    pub coverage_horizon: usize,
    /// `δ` of the coverage suite; the filter `δ` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_delta: Option<f64>,
    #[serde(default = "default_suite_runs")]
    pub safety_runs: usize,
    #[serde(default = "default_instances")]
    pub equivalence_instances: usize,
    #[serde(default = "default_samples")]
    pub equivalence_samples: usize,
}

impl Default for VerifyBlock {
    fn default() -> Self {
        Self {
            coverage_runs: default_suite_runs(),
            coverage_horizon: default_coverage_horizon(),
            coverage_delta: None,
            safety_runs: default_suite_runs(),
            equivalence_instances: default_instances(),
            equivalence_samples: default_samples(),
        }
    }
}

fn one() -> usize {
    1
}

fn default_poe_window() -> usize {
    20
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_suite_runs() -> usize {
    2000
}

fn default_coverage_horizon() -> usize {
    200
}

fn default_instances() -> usize {
    200
}

fn default_samples() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemBlock,
    pub assumptions: AssumptionsBlock,
    pub safety: SafetyBlock,
    pub filter: FilterBlock,
    #[serde(default)]
    pub policy: NominalPolicy,
    #[serde(default)]
    pub excitation: Excitation,
    pub run: RunBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<DecayBlock>,
    #[serde(default)]
    pub verify: VerifyBlock,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{what} must be a nonempty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// 64-bit FNV-1a hash of the canonical serialization, in hex, ignoring the
    /// output directory and thread count. Identifies the experiment in output
    /// artifacts; not a cryptographic digest.
    pub fn digest(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.run.out = default_out();
        canonical.run.threads = None;
        let hash = canonical
            .to_toml()?
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3));
        Ok(format!("{hash:016x}"))
    }

    pub fn model(&self) -> Result<LtiModel> {
        LtiModel::new(matrix(&self.system.a, "system.a")?, matrix(&self.system.b, "system.b")?)
    }

    /// Builds the closed-loop experiment. With `check_assumptions` off the
    /// noise and parameter bounds are taken at face value, which is only
    /// meant for negative controls.
    pub fn closed_loop(&self, check_assumptions: bool) -> Result<ClosedLoopConfig> {
        let model = self.model()?;
        let (n, m) = (model.n(), model.m());
        let a = &self.assumptions;
        let w = matrix(&self.system.w, "system.w")?;
        let noise = if check_assumptions {
            NoiseSpec::new(w, a.r).map_err(|e| match e {
                Error::Assumption(msg) => Error::Assumption(format!("noise bound assumption violated: {msg}")),
                other => other,
            })?
        } else {
            NoiseSpec::new_unchecked(w, a.r)?
        };
        let norm = model.frobenius_norm();
        if check_assumptions && norm > a.s {
            return Err(Error::Assumption(format!(
                "parameter norm bound assumption violated: s = {} < ||[A B]||_F = {norm}",
                a.s
            )));
        }
        let exponent = if self.filter.strict_paper_beta { BetaExponent::StateDim } else { BetaExponent::ParameterDim };
        let confidence = ConfidenceConfig::new(a.r, a.s, a.lambda, self.filter.delta, n, m)?.with_exponent(exponent);
        self.safety.input_set.validate()?;
        let schedule = self
            .safety
            .schedule
            .iter()
            .enumerate()
            .map(|(k, c)| {
                Constraint::new(matrix(&c.h_mat, &format!("safety.schedule[{k}].h_mat"))?, DVector::from_column_slice(&c.h))
            })
            .collect::<Result<Vec<_>>>()?;
        let safety = SafetySpec::new(schedule, self.safety.input_set.clone(), n)?;
        if self.run.horizon == 0 {
            return Err(Error::Config("run.horizon must be >= 1".into()));
        }
        if self.run.runs == 0 {
            return Err(Error::Config("run.runs must be >= 1".into()));
        }
        let t = self.filter.noise_only_threshold;
        if !(t >= 0.0) {
            return Err(Error::Config(format!("filter.noise_only_threshold must be >= 0, got {t}")));
        }
        let cfg = ClosedLoopConfig {
            model,
            noise,
            x0: DVector::from_column_slice(&self.system.x0),
            confidence,
            safety,
            policy: self.policy.clone(),
            excitation: self.excitation,
            filter: self.filter.mode,
            options: FilterOptions { noise_only_threshold: self.filter.noise_only_switch.then_some(t) },
            horizon: self.run.horizon,
            poe_window: self.run.poe_window,
            seed: self.run.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
