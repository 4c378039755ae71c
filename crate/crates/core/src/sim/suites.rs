//! Statistical verification suites.
//!
//! * coverage: the confidence ellipsoid contains the true model at the final
//!   step with frequency at least `1 − δ`;
//! * safety: among feasible filter steps the successor state meets the
//!   constraints with frequency at least `1 − δ`;
//! * equivalence: inputs feasible for the tightened program satisfy the
//!   original constraint for sampled model errors and noise on both balls,
//!   while inputs just outside it are caught by some sample;
//! * noise ball: `wᵀw ≤ 2rn/δ` with frequency at least `1 − δ/2`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::confidence::ConfidenceConfig;
use crate::error::Result;
use crate::filter::{build_tightened_program, solve_projection, TightenedProgram};
use crate::sim::harness::{ClosedLoopConfig, FilterMode};
use crate::sim::monte_carlo::{monte_carlo, MonteCarloReport};
use crate::sim::rng_stream;
use crate::sim::stats::BinomialEstimate;
use crate::types::{InputSet, LtiModel};

/// Stream used by the sampling suites.
const SUITE_STREAM: u64 = 2;

/// Tolerance on the sufficiency direction of the equivalence suite.
pub const EQUIVALENCE_TOL: f64 = 1e-9;
/// Distance outside the tightened set of the necessity probe.
pub const NECESSITY_OFFSET: f64 = 1e-3;
/// Required share of instances whose probe is caught.
pub const NECESSITY_RATE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatisticalSuite {
    pub outcome: SuiteOutcome,
    pub estimate: BinomialEstimate,
    pub report: MonteCarloReport,
}

/// Final-step coverage over `runs` runs with the filter bypassed.
pub fn coverage_suite(config: &ClosedLoopConfig, runs: usize, threads: Option<usize>) -> Result<StatisticalSuite> {
    let config = ClosedLoopConfig { filter: FilterMode::Bypass, ..config.clone() };
    let report = monte_carlo(&config, runs, threads)?;
    let estimate = report.aggregate.coverage;
    let required = 1.0 - config.confidence.delta;
    let passed = estimate.exceeds(required);
    let detail = format!(
        "covered {}/{} (freq {:.4}, 99% CI [{:.4}, {:.4}]), required lower bound >= {required:.4}",
        estimate.successes, estimate.trials, estimate.frequency, estimate.lower_99, estimate.upper_99
    );
    Ok(StatisticalSuite { outcome: SuiteOutcome { name: "coverage", passed, detail }, estimate, report })
}

/// Per-step safety among feasible steps over `runs` filtered runs.
pub fn safety_suite(config: &ClosedLoopConfig, runs: usize, threads: Option<usize>) -> Result<StatisticalSuite> {
    let report = monte_carlo(config, runs, threads)?;
    let agg = &report.aggregate;
    let estimate = agg.feasible_safety;
    let required = 1.0 - config.confidence.delta;
    let passed = estimate.exceeds(required);
    let detail = format!(
        "safe {}/{} feasible steps (freq {:.4}, 99% CI [{:.4}, {:.4}]), required lower bound >= {required:.4}; \
         infeasible rate {:.4}",
        estimate.successes, estimate.trials, estimate.frequency, estimate.lower_99, estimate.upper_99, agg.infeasible_rate
    );
    Ok(StatisticalSuite { outcome: SuiteOutcome { name: "safety", passed, detail }, estimate, report })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub instances: usize,
    pub samples: usize,
    pub points_checked: usize,
    /// Largest sampled violation over all feasible points.
    pub max_violation: f64,
    pub sufficiency_failures: usize,
    pub necessity_detected: usize,
}

impl EquivalenceReport {
    pub fn necessity_rate(&self) -> f64 {
        self.necessity_detected as f64 / self.instances as f64
    }

    pub fn passes(&self) -> bool {
        self.sufficiency_failures == 0 && self.necessity_rate() >= NECESSITY_RATE
    }

    pub fn outcome(&self) -> SuiteOutcome {
        SuiteOutcome {
            name: "equivalence",
            passed: self.passes(),
            detail: format!(
                "{} instances x {} samples: {} feasible points, max violation {:.3e} (tol {EQUIVALENCE_TOL:e}), \
                 probe detection {:.3} (required >= {NECESSITY_RATE})",
                self.instances,
                self.samples,
                self.points_checked,
                self.max_violation,
                self.necessity_rate()
            ),
        }
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn unit_direction(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    loop {
        for v in out.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            out.iter_mut().for_each(|v| *v /= norm);
            return;
        }
    }
}

/// `dir ← (a + σ g) / ‖a + σ g‖` for unit `a`.
fn perturbed_direction(rng: &mut ChaCha8Rng, a: &[f64], sigma: f64, out: &mut [f64]) {
    for (o, &ai) in out.iter_mut().zip(a) {
        *o = ai + sigma * rng.sample::<f64, _>(StandardNormal);
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    out.iter_mut().for_each(|v| *v /= norm);
}

struct Instance {
    prog: TightenedProgram,
    /// `H(Âx) − h`, the input-free part of each original constraint.
    offset: DVector<f64>,
    /// `H B̂`
    gain: DMatrix<f64>,
    /// Rows of `H` scaled to unit length.
    unit_rows: Vec<Vec<f64>>,
    boundary: DVector<f64>,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let n = rng.random_range(1..=3);
    let m = rng.random_range(1..=3);
    let p = rng.random_range(1..=4);
    let model = LtiModel::new(gaussian_matrix(rng, n, n), gaussian_matrix(rng, n, m))?;
    let x = gaussian_matrix(rng, n, 1).column(0).into_owned();
    let h_mat = gaussian_matrix(rng, p, n);
    let r = 10f64.powf(rng.random_range(-3.0..0.0));
    let delta = rng.random_range(0.05..0.5);
    let cfg = ConfidenceConfig::new(r, 1.0, 1.0, delta, n, m)?;
    let beta_half = rng.random_range(0.1..3.0);
    let zeta = rng.random_range(0.05..2.0);
    let input_set = InputSet::symmetric_box(m, 3.0)?;

    // h puts `boundary` exactly on tightened row 0 and strictly inside the rest.
    let boundary = DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
    let total = crate::filter::TighteningTerms::new(&cfg, beta_half, zeta).total();
    let lhs = &h_mat * model.predict(&x, &boundary);
    let h_vec = DVector::from_fn(p, |i, _| {
        let slack = if i == 0 { 0.0 } else { rng.random_range(0.0..2.0) };
        lhs[i] + total * h_mat.row(i).norm() + slack
    });
    let prog = build_tightened_program(&model, &x, &h_mat, &h_vec, &cfg, beta_half, zeta, &input_set, &boundary)?;
    let offset = &h_mat * (model.a() * &x) - &h_vec;
    let gain = &h_mat * model.b();
    let unit_rows = h_mat.row_iter().map(|row| (row / row.norm()).iter().copied().collect()).collect();
    Ok(Instance { prog, offset, gain, unit_rows, boundary })
}

/// Sampled `(v, w)` pairs, stored as `H v` and `H w`.
fn sample_disturbances(rng: &mut ChaCha8Rng, inst: &Instance, samples: usize) -> Vec<f64> {
    let n = inst.prog.x.len();
    let p = inst.unit_rows.len();
    let radii = [inst.prog.terms.model, inst.prog.terms.noise];
    let mut dirs = [vec![0.0; n], vec![0.0; n]];
    let mut out = Vec::with_capacity(samples * p);
    for _ in 0..samples {
        let mode = rng.random_range(0..4);
        let row = rng.random_range(0..p);
        let mut scales = radii;
        for (b, dir) in dirs.iter_mut().enumerate() {
            match mode {
                0 => unit_direction(rng, dir),
                1 => {
                    unit_direction(rng, dir);
                    scales[b] *= rng.random::<f64>().powf(1.0 / n as f64);
                }
                _ => {
                    let sigma = 10f64.powf(rng.random_range(-4.0..0.0));
                    let target = if mode == 3 { rng.random_range(0..p) } else { row };
                    perturbed_direction(rng, &inst.unit_rows[target], sigma, dir);
                    if mode == 3 && rng.random::<bool>() {
                        dir.iter_mut().for_each(|v| *v = -*v);
                    }
                }
            }
        }
        for i in 0..p {
            let h_row = inst.prog.h_mat.row(i);
            let mut acc = 0.0;
            for (b, dir) in dirs.iter().enumerate() {
                acc += scales[b] * dir.iter().enumerate().map(|(j, d)| h_row[j] * d).sum::<f64>();
            }
            out.push(acc);
        }
    }
    out
}

/// Largest sampled `max_i H_i(Âx + B̂u + v + w) − h_i`.
fn worst_violation(inst: &Instance, disturbances: &[f64], u: &DVector<f64>) -> f64 {
    let base = &inst.offset + &inst.gain * u;
    let p = base.len();
    disturbances
        .chunks_exact(p)
        .map(|hd| (0..p).map(|i| base[i] + hd[i]).fold(f64::NEG_INFINITY, f64::max))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn equivalence_suite(instances: usize, samples: usize, seed: u64) -> Result<EquivalenceReport> {
    let mut rng = rng_stream(seed, SUITE_STREAM);
    let mut report = EquivalenceReport {
        instances,
        samples,
        points_checked: 0,
        max_violation: f64::NEG_INFINITY,
        sufficiency_failures: 0,
        necessity_detected: 0,
    };
    for _ in 0..instances {
        let inst = random_instance(&mut rng)?;
        let m = inst.boundary.len();
        let mut points = vec![inst.boundary.clone()];
        for _ in 0..3 {
            let mut prog = inst.prog.clone();
            prog.u_nominal = DVector::from_fn(m, |_, _| rng.random_range(-4.0..4.0));
            if let Some(u) = solve_projection(&prog)?.u {
                points.push(u);
            }
        }
        for _ in 0..16 {
            let u = DVector::from_fn(m, |_, _| rng.random_range(-3.0..3.0));
            if inst.prog.state_violation(&u) <= 0.0 {
                points.push(u);
            }
        }
        let disturbances = sample_disturbances(&mut rng, &inst, samples);
        let mut failed = false;
        for u in &points {
            let worst = worst_violation(&inst, &disturbances, u);
            report.max_violation = report.max_violation.max(worst);
            failed |= worst > EQUIVALENCE_TOL;
        }
        report.points_checked += points.len();
        report.sufficiency_failures += usize::from(failed);

        let g0 = inst.gain.row(0).transpose();
        let probe = &inst.boundary + &g0 * (NECESSITY_OFFSET / g0.norm());
        if worst_violation(&inst, &disturbances, &probe) > 0.0 {
            report.necessity_detected += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseBallReport {
    pub n: usize,
    pub r: f64,
    pub delta: f64,
    /// `2rn/δ`
    pub threshold: f64,
    pub estimate: BinomialEstimate,
    pub required: f64,
}

impl NoiseBallReport {
    pub fn passes(&self) -> bool {
        self.estimate.frequency >= self.required
    }
}

/// Frequency of `wᵀw ≤ 2rn/δ` for `w ~ N(0, rI)`.
pub fn noise_ball_suite(n: usize, r: f64, delta: f64, draws: usize, seed: u64) -> NoiseBallReport {
    let mut rng = rng_stream(seed, SUITE_STREAM);
    let threshold = 2.0 * r * n as f64 / delta;
    let inside = (0..draws)
        .filter(|_| {
            let sq: f64 = (0..n).map(|_| r * rng.sample::<f64, _>(StandardNormal).powi(2)).sum();
            sq <= threshold
        })
        .count();
    NoiseBallReport {
        n,
        r,
        delta,
        threshold,
        estimate: BinomialEstimate::new(inside as u64, draws as u64),
        required: 1.0 - delta / 2.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_equivalence_run() {
        let report = equivalence_suite(20, 2000, 3).unwrap();
        assert_eq!(report.sufficiency_failures, 0, "{report:?}");
        assert!(report.max_violation <= EQUIVALENCE_TOL);
        assert!(report.necessity_rate() >= NECESSITY_RATE, "{report:?}");
    }

    #[test]
    fn boundary_point_is_tight() {
        // With the aligned worst case the boundary point attains zero violation.
        let mut rng = rng_stream(11, SUITE_STREAM);
        let inst = random_instance(&mut rng).unwrap();
        let u = &inst.boundary;
        let exact = (&inst.offset + &inst.gain * u)[0] + inst.prog.e_bar[0];
        assert!(exact.abs() < 1e-9);
    }

    #[test]
    fn noise_ball_scalar() {
        let report = noise_ball_suite(1, 0.5, 0.1, 10_000, 5);
        assert_eq!(report.threshold, 10.0);
        assert!(report.passes());
    }
}
