//! Closed-loop safe-learning experiment and its per-step trace.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::confidence::{self, ConfidenceConfig};
use crate::error::{Error, Result};
use crate::estimator::EstimatorState;
use crate::filter::{self, FilterOptions, FilterStatus, ModelSource, TighteningTerms};
use crate::sim::excitation::Excitation;
use crate::sim::plant::Plant;
use crate::sim::poe::PoeWindow;
use crate::sim::rng_stream;
use crate::types::{check_safety, LtiModel, NoiseSpec, SafetySpec};

/// Stream index of the excitation generator.
pub const EXCITATION_STREAM: u64 = 1;

/// Nominal controller, evaluated before excitation and clipping into `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NominalPolicy {
    #[default]
    Zero,
    Constant { u: Vec<f64> },
    /// `u = K x`, `K` given row by row.
    Feedback { gain: Vec<Vec<f64>> },
}

impl NominalPolicy {
    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        match self {
            NominalPolicy::Zero => Ok(()),
            NominalPolicy::Constant { u } if u.len() == m => Ok(()),
            NominalPolicy::Feedback { gain } if gain.len() == m && gain.iter().all(|r| r.len() == n) => Ok(()),
            _ => Err(Error::Dimension(format!("nominal policy does not match n={n}, m={m}"))),
        }
    }

    pub fn evaluate(&self, x: &DVector<f64>, m: usize) -> DVector<f64> {
        match self {
            NominalPolicy::Zero => DVector::zeros(m),
            NominalPolicy::Constant { u } => DVector::from_column_slice(u),
            NominalPolicy::Feedback { gain } => {
                let k = DMatrix::from_fn(m, x.len(), |i, j| gain[i][j]);
                k * x
            }
        }
    }
}

/// How the nominal input is turned into the applied input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Project onto the tightened program built from the learned model.
    #[default]
    Project,
    /// Project using the true model, so only the noise term tightens.
    KnownModel,
    /// Apply the nominal input unchanged; diagnostics are still recorded.
    Bypass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopConfig {
    pub model: LtiModel,
    pub noise: NoiseSpec,
    pub x0: DVector<f64>,
    pub confidence: ConfidenceConfig,
    pub safety: SafetySpec,
    pub policy: NominalPolicy,
    pub excitation: Excitation,
    pub filter: FilterMode,
    pub options: FilterOptions,
    pub horizon: usize,
    pub poe_window: usize,
    pub seed: u64,
}

impl ClosedLoopConfig {
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.model.n(), self.model.m());
        if self.confidence.n != n || self.confidence.m != m {
            return Err(Error::Dimension("confidence config dimensions differ from the model".into()));
        }
        if self.x0.len() != n || self.noise.dim() != n || self.safety.input_set().dim() != m {
            return Err(Error::Dimension("initial state, noise or input set dimension differs from the model".into()));
        }
        if self.safety.schedule().iter().any(|c| c.h_mat.ncols() != n) {
            return Err(Error::Dimension("constraint matrix column count differs from n".into()));
        }
        self.confidence.validate()?;
        self.policy.validate(n, m)?;
        self.excitation.validate()?;
        if self.poe_window == 0 {
            return Err(Error::InvalidParameter("excitation window must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Feasible,
    Infeasible,
    Bypassed,
}

impl StepStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepStatus::Feasible => "feasible",
            StepStatus::Infeasible => "infeasible",
            StepStatus::Bypassed => "bypassed",
        }
    }
}

impl From<FilterStatus> for StepStatus {
    fn from(status: FilterStatus) -> Self {
        match status {
            FilterStatus::Feasible => StepStatus::Feasible,
            FilterStatus::Infeasible => StepStatus::Infeasible,
        }
    }
}

/// One simulated step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub x: DVector<f64>,
    pub u_nominal: DVector<f64>,
    pub u_applied: DVector<f64>,
    pub status: StepStatus,
    /// `β(δ/(2n))` at `V[k]`.
    pub beta: f64,
    pub zeta: f64,
    pub zeta_applied: f64,
    pub terms: TighteningTerms,
    pub e_bar_max: f64,
    pub distance: f64,
    pub alpha_hat: f64,
    pub gamma_hat: f64,
    /// `H[k] x[k] ≤ h[k]`
    pub safe: bool,
    /// `H[k+1] x[k+1] ≤ h[k+1]`
    pub next_safe: bool,
    /// Every row of the estimate at `V[k]` lies within `β(δ/n)` of the truth.
    pub covered: bool,
}

impl TraceRow {
    /// `ζ n β(δ/(2n))`, the model-error radius before any noise-only switch.
    pub fn tau(&self, n: usize) -> f64 {
        self.zeta * n as f64 * self.beta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub rows: Vec<TraceRow>,
    /// Coverage after the last transition, at `V[horizon]`.
    pub final_covered: bool,
}

/// Column order of the trace CSV.
pub fn csv_header(n: usize, m: usize) -> Vec<String> {
    let mut header = vec!["k".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..m).map(|j| format!("u_nominal{j}")));
    header.extend((0..m).map(|j| format!("u{j}")));
    header.extend(
        [
            "status",
            "beta",
            "zeta",
            "zeta_applied",
            "model_term",
            "noise_term",
            "e_bar_max",
            "distance",
            "alpha_hat",
            "gamma_hat",
            "safe",
            "next_safe",
            "covered",
        ]
        .map(String::from),
    );
    header
}

impl RunTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(csv_header(self.n, self.m))?;
        for row in &self.rows {
            let mut record = vec![row.k.to_string()];
            record.extend(row.x.iter().map(f64::to_string));
            record.extend(row.u_nominal.iter().map(f64::to_string));
            record.extend(row.u_applied.iter().map(f64::to_string));
            record.push(row.status.as_str().to_string());
            for value in [
                row.beta,
                row.zeta,
                row.zeta_applied,
                row.terms.model,
                row.terms.noise,
                row.e_bar_max,
                row.distance,
                row.alpha_hat,
                row.gamma_hat,
            ] {
                record.push(value.to_string());
            }
            for flag in [row.safe, row.next_safe, row.covered] {
                record.push(u8::from(flag).to_string());
            }
            wtr.write_record(&record)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("CSV output is UTF-8"))
    }
}

/// A running experiment: plant, estimator, excitation monitor and filter.
#[derive(Debug, Clone)]
pub struct ClosedLoop<'a> {
    config: &'a ClosedLoopConfig,
    plant: Plant,
    estimator: EstimatorState,
    window: PoeWindow,
    excitation_rng: ChaCha8Rng,
    theta_true: DMatrix<f64>,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(config: &'a ClosedLoopConfig) -> Result<Self> {
        config.validate()?;
        let plant = Plant::new(config.model.clone(), config.noise.clone(), config.x0.clone(), config.seed)?;
        let estimator = EstimatorState::new(config.model.n(), config.model.m(), config.confidence.lambda)?;
        Ok(Self {
            config,
            plant,
            estimator,
            window: PoeWindow::new(config.poe_window)?,
            excitation_rng: rng_stream(config.seed, EXCITATION_STREAM),
            theta_true: config.model.theta(),
        })
    }

    pub fn k(&self) -> usize {
        self.plant.k()
    }

    pub fn state(&self) -> &DVector<f64> {
        self.plant.state()
    }

    pub fn estimator(&self) -> &EstimatorState {
        &self.estimator
    }

    pub fn window(&self) -> &PoeWindow {
        &self.window
    }

    /// `(β(δ/(2n)), ζ, terms)` at the current state and Gram matrix.
    pub fn uncertainty(&self) -> Result<(f64, f64, TighteningTerms)> {
        filter::uncertainty_terms(&self.estimator, &self.config.confidence, self.plant.state(), self.config.safety.input_set())
    }

    /// Whether the confidence ellipsoid `β(δ/n)` contains the true model now.
    pub fn covered(&self) -> Result<bool> {
        let cfg = &self.config.confidence;
        let radius = confidence::beta(cfg, self.estimator.logdet(), cfg.delta / cfg.n as f64)?;
        Ok(confidence::confidence_holds(&self.theta_true, self.estimator.theta(), self.estimator.cholesky(), radius))
    }

    pub fn step(&mut self) -> Result<TraceRow> {
        let cfg = self.config;
        let k = self.plant.k();
        let m = cfg.model.m();
        let x = self.plant.state().clone();
        let input_set = cfg.safety.input_set();

        let raw = cfg.policy.evaluate(&x, m) + cfg.excitation.sample(m, &mut self.excitation_rng);
        let u_nominal = input_set.clip(&raw)?;

        let (u_applied, status, beta, zeta, zeta_applied, terms, e_bar_max, distance) = match cfg.filter {
            FilterMode::Project | FilterMode::KnownModel => {
                let source = match cfg.filter {
                    FilterMode::KnownModel => ModelSource::Known(&cfg.model),
                    _ => ModelSource::Estimated(&self.estimator),
                };
                let step = filter::safe_step(source, &cfg.confidence, &x, &u_nominal, &cfg.safety, k, &cfg.options)?;
                let d = step.diagnostics;
                (
                    step.result.applied_input().clone(),
                    StepStatus::from(step.result.status),
                    d.beta,
                    d.zeta,
                    d.zeta_applied,
                    d.terms,
                    d.e_bar_max,
                    step.result.distance,
                )
            }
            FilterMode::Bypass => {
                let (beta, zeta, terms) = self.uncertainty()?;
                let applied = confidence::inverse_weighted_norm(
                    self.estimator.cholesky(),
                    &crate::estimator::stack(&x, &u_nominal),
                );
                let next = cfg.safety.constraint_at(k + 1);
                let widest = next.h_mat.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
                (u_nominal.clone(), StepStatus::Bypassed, beta, zeta, applied, terms, terms.total() * widest, 0.0)
            }
        };

        let now = cfg.safety.constraint_at(k);
        let safe = check_safety(&now.h_mat, &now.h_vec, &x)?.safe;
        let covered = self.covered()?;
        let (alpha_hat, gamma_hat) = self.window.update(&x, &u_applied);

        let x_next = self.plant.step(&u_applied)?.clone();
        self.estimator.update(&x, &u_applied, &x_next)?;
        let next = cfg.safety.constraint_at(k + 1);
        let next_safe = check_safety(&next.h_mat, &next.h_vec, &x_next)?.safe;

        Ok(TraceRow {
            k,
            x,
            u_nominal,
            u_applied,
            status,
            beta,
            zeta,
            zeta_applied,
            terms,
            e_bar_max,
            distance,
            alpha_hat,
            gamma_hat,
            safe,
            next_safe,
            covered,
        })
    }
}

pub fn run_closed_loop(config: &ClosedLoopConfig) -> Result<RunTrace> {
    let mut sim = ClosedLoop::new(config)?;
    let rows = (0..config.horizon).map(|_| sim.step()).collect::<Result<Vec<_>>>()?;
    let final_covered = sim.covered()?;
    Ok(RunTrace { seed: config.seed, n: config.model.n(), m: config.model.m(), rows, final_covered })
}
