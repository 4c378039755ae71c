//! Independent closed-loop runs and their aggregate statistics.
//!
//! Run `i` uses seed `base + i`. Runs execute on a rayon pool and the
//! reduction walks them in seed order, so the aggregate does not depend on
//! scheduling.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sim::harness::{run_closed_loop, ClosedLoopConfig, RunTrace, StepStatus};
use crate::sim::stats::BinomialEstimate;

/// `α̂` at or below this fraction of `γ̂` counts as lost excitation.
pub const POE_LOST_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: usize,
    pub feasible: usize,
    pub infeasible: usize,
    pub bypassed: usize,
    /// Feasible steps whose successor state met the constraints.
    pub feasible_safe: usize,
    /// Steps of any status whose successor state violated the constraints.
    pub violations: usize,
    pub final_covered: bool,
    /// Smallest `α̂` over full excitation windows.
    pub min_alpha: Option<f64>,
    pub poe_lost: bool,
    pub final_tau: Option<f64>,
    pub mean_distance: f64,
}

impl RunSummary {
    pub fn from_trace(trace: &RunTrace, poe_window: usize) -> Self {
        let count = |status| trace.rows.iter().filter(|r| r.status == status).count();
        let full_windows = trace.rows.iter().filter(|r| r.k + 1 >= poe_window);
        let mut min_alpha: Option<f64> = None;
        let mut poe_lost = false;
        for row in full_windows {
            min_alpha = Some(min_alpha.map_or(row.alpha_hat, |a| a.min(row.alpha_hat)));
            poe_lost |= row.alpha_hat <= POE_LOST_TOL * row.gamma_hat.max(1.0);
        }
        let steps = trace.rows.len();
        Self {
            seed: trace.seed,
            steps,
            feasible: count(StepStatus::Feasible),
            infeasible: count(StepStatus::Infeasible),
            bypassed: count(StepStatus::Bypassed),
            feasible_safe: trace.rows.iter().filter(|r| r.status == StepStatus::Feasible && r.next_safe).count(),
            violations: trace.rows.iter().filter(|r| !r.next_safe).count(),
            final_covered: trace.final_covered,
            min_alpha,
            poe_lost,
            final_tau: trace.rows.last().map(|r| r.tau(trace.n)),
            mean_distance: if steps == 0 {
                0.0
            } else {
                trace.rows.iter().map(|r| r.distance).sum::<f64>() / steps as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub runs: usize,
    pub steps: usize,
    pub feasible_steps: usize,
    pub infeasible_steps: usize,
    pub bypassed_steps: usize,
    pub infeasible_rate: f64,
    /// `H x[k+1] ≤ h` among feasible steps.
    pub feasible_safety: BinomialEstimate,
    /// `H x[k+1] ≤ h` over all steps.
    pub step_safety: BinomialEstimate,
    /// Confidence-set coverage at the final step.
    pub coverage: BinomialEstimate,
    pub runs_with_violation: usize,
    pub poe_lost_runs: usize,
    /// Mean over runs of `ζ n β(δ/(2n))` at each step.
    pub tau_curve: Vec<f64>,
    /// Mean over runs of the largest tightening at each step.
    pub e_bar_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloReport {
    pub summaries: Vec<RunSummary>,
    pub aggregate: Aggregate,
    /// Full trace of the first run.
    pub first_trace: RunTrace,
}

struct RunOutput {
    summary: RunSummary,
    tau: Vec<f64>,
    e_bar: Vec<f64>,
    trace: Option<RunTrace>,
}

fn execute(config: &ClosedLoopConfig, i: usize) -> Result<RunOutput> {
    let run_config = config.with_seed(config.seed.wrapping_add(i as u64));
    let trace = run_closed_loop(&run_config)?;
    let n = trace.n;
    Ok(RunOutput {
        summary: RunSummary::from_trace(&trace, config.poe_window),
        tau: trace.rows.iter().map(|r| r.tau(n)).collect(),
        e_bar: trace.rows.iter().map(|r| r.e_bar_max).collect(),
        trace: (i == 0).then_some(trace),
    })
}

/// Runs `runs` experiments seeded `config.seed, config.seed + 1, …` on
/// `threads` workers (all cores when `None`).
pub fn monte_carlo(config: &ClosedLoopConfig, runs: usize, threads: Option<usize>) -> Result<MonteCarloReport> {
    if runs == 0 {
        return Err(Error::InvalidParameter("runs must be >= 1".into()));
    }
    config.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let outputs: Vec<RunOutput> =
        pool.install(|| (0..runs).into_par_iter().map(|i| execute(config, i)).collect::<Result<Vec<_>>>())?;
    Ok(reduce(outputs, config.horizon))
}

fn reduce(outputs: Vec<RunOutput>, horizon: usize) -> MonteCarloReport {
    let runs = outputs.len();
    let mut tau_curve = vec![0.0; horizon];
    let mut e_bar_curve = vec![0.0; horizon];
    let mut summaries = Vec::with_capacity(runs);
    let mut first_trace = None;
    for out in outputs {
        for (acc, v) in tau_curve.iter_mut().zip(&out.tau) {
            *acc += v;
        }
        for (acc, v) in e_bar_curve.iter_mut().zip(&out.e_bar) {
            *acc += v;
        }
        if out.trace.is_some() {
            first_trace = out.trace;
        }
        summaries.push(out.summary);
    }
    for v in tau_curve.iter_mut().chain(e_bar_curve.iter_mut()) {
        *v /= runs as f64;
    }
    let total = |f: fn(&RunSummary) -> usize| summaries.iter().map(f).sum::<usize>();
    let steps = total(|s| s.steps);
    let feasible_steps = total(|s| s.feasible);
    let infeasible_steps = total(|s| s.infeasible);
    let aggregate = Aggregate {
        runs,
        steps,
        feasible_steps,
        infeasible_steps,
        bypassed_steps: total(|s| s.bypassed),
        infeasible_rate: if steps == 0 { 0.0 } else { infeasible_steps as f64 / steps as f64 },
        feasible_safety: BinomialEstimate::new(total(|s| s.feasible_safe) as u64, feasible_steps as u64),
        step_safety: BinomialEstimate::new((steps - total(|s| s.violations)) as u64, steps as u64),
        coverage: BinomialEstimate::new(summaries.iter().filter(|s| s.final_covered).count() as u64, runs as u64),
        runs_with_violation: summaries.iter().filter(|s| s.violations > 0).count(),
        poe_lost_runs: summaries.iter().filter(|s| s.poe_lost).count(),
        tau_curve,
        e_bar_curve,
    };
    MonteCarloReport { summaries, aggregate, first_trace: first_trace.expect("run 0 always keeps its trace") }
}
