//! The `run`, `decay` and `verify` subcommands.
//!
//! Each command reads an [`ExperimentConfig`], applies command-line
//! overrides, writes its artifacts under the output directory and reports
//! progress lines to `log`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::sim::decay::{self, DecayReport};
use crate::sim::harness::FilterMode;
use crate::sim::monte_carlo::{monte_carlo, Aggregate};
use crate::sim::suites::{self, SuiteOutcome};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub strict_paper_beta: bool,
    /// Skip the noise and parameter bound checks (negative controls only).
    pub unchecked_assumptions: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(runs) = self.runs {
            cfg.run.runs = runs;
            cfg.verify.coverage_runs = runs;
            cfg.verify.safety_runs = runs;
        }
        if let Some(out) = &self.out {
            cfg.run.out = out.clone();
        }
        if self.threads.is_some() {
            cfg.run.threads = self.threads;
        }
        cfg.filter.strict_paper_beta |= self.strict_paper_beta;
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut file = create(dir, name)?;
    serde_json::to_writer_pretty(&mut file, value).map_err(|e| Error::Io(e.into()))?;
    writeln!(file)?;
    file.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config_digest: String,
    pub seed: u64,
    pub runs: usize,
    pub horizon: usize,
    pub aggregate: Aggregate,
    pub warnings: Vec<String>,
}

/// Writes `trace.csv` (first run), `runs.csv` (one line per run when
/// `runs > 1`) and `summary.json`.
pub fn run(cfg: &ExperimentConfig, overrides: &Overrides, log: &mut dyn Write) -> Result<RunReport> {
    let mut cfg = cfg.clone();
    overrides.apply(&mut cfg);
    let closed_loop = cfg.closed_loop(!overrides.unchecked_assumptions)?;
    let out = cfg.run.out.clone();
    let report = monte_carlo(&closed_loop, cfg.run.runs, cfg.run.threads)?;

    let mut trace = create(&out, "trace.csv")?;
    report.first_trace.write_csv(&mut trace)?;
    trace.flush()?;
    if cfg.run.runs > 1 {
        let mut wtr = csv::Writer::from_writer(create(&out, "runs.csv")?);
        for summary in &report.summaries {
            wtr.serialize(summary)?;
        }
        wtr.flush()?;
    }

    let agg = report.aggregate;
    let mut warnings = Vec::new();
    if agg.poe_lost_runs > 0 {
        warnings.push(format!("excitation lost rank in {} of {} runs", agg.poe_lost_runs, agg.runs));
    }
    let summary = RunReport {
        config_digest: cfg.digest()?,
        seed: cfg.run.seed,
        runs: cfg.run.runs,
        horizon: cfg.run.horizon,
        aggregate: agg,
        warnings,
    };
    write_json(&out, "summary.json", &summary)?;
    let a = &summary.aggregate;
    writeln!(
        log,
        "{} runs x {} steps: {} feasible, {} infeasible, {} bypassed; runs with a violation: {}; final coverage {:.4}",
        a.runs, summary.horizon, a.feasible_steps, a.infeasible_steps, a.bypassed_steps, a.runs_with_violation, a.coverage.frequency
    )?;
    for w in &summary.warnings {
        writeln!(log, "warning: {w}")?;
    }
    Ok(summary)
}

/// Writes `decay.csv` (`k, tau, reference`) and `decay.json`.
pub fn decay(cfg: &ExperimentConfig, overrides: &Overrides, log: &mut dyn Write) -> Result<DecayReport> {
    let mut cfg = cfg.clone();
    overrides.apply(&mut cfg);
    if let Some(block) = &cfg.decay {
        cfg.run.horizon = block.horizon;
    }
    let closed_loop = cfg.closed_loop(!overrides.unchecked_assumptions)?;
    let report = decay::run_decay(&closed_loop)?;
    let out = cfg.run.out.clone();

    let mut wtr = csv::Writer::from_writer(create(&out, "decay.csv")?);
    wtr.write_record(["k", "tau", "reference"])?;
    for (&k, &tau) in report.k.iter().zip(&report.tau) {
        let reference = report.reference(k).map_or(String::new(), |v| v.to_string());
        wtr.write_record([k.to_string(), tau.to_string(), reference])?;
    }
    wtr.flush()?;
    write_json(&out, "decay.json", &DecaySummary::from(&report))?;

    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    writeln!(
        log,
        "tau[1] = {}, fit c = {}, tau[1e4]/tau[1e2] = {} (bound {:.4}), tau[1e5]/tau[1e2] = {} (bound {})",
        fmt(report.tau.first().copied()),
        fmt(report.fit),
        fmt(report.rate_ratio),
        report.rate_ratio_bound,
        fmt(report.tail_ratio),
        report.tail_ratio_bound
    )?;
    for w in &report.warnings {
        writeln!(log, "warning: {w}")?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
struct DecaySummary {
    horizon: usize,
    fit: Option<f64>,
    rate_ratio: Option<f64>,
    rate_ratio_bound: f64,
    tail_ratio: Option<f64>,
    tail_ratio_bound: f64,
    passes: bool,
    min_alpha: Option<f64>,
    poe_observed: bool,
    warnings: Vec<String>,
}

impl From<&DecayReport> for DecaySummary {
    fn from(r: &DecayReport) -> Self {
        Self {
            horizon: r.k.len(),
            fit: r.fit,
            rate_ratio: r.rate_ratio,
            rate_ratio_bound: r.rate_ratio_bound,
            tail_ratio: r.tail_ratio,
            tail_ratio_bound: r.tail_ratio_bound,
            passes: r.passes(),
            min_alpha: r.min_alpha,
            poe_observed: r.poe_observed,
            warnings: r.warnings.clone(),
        }
    }
}

/// Runs the coverage, safety and equivalence suites, prints one line per
/// suite and writes `verify.csv`. Returns the suite outcomes.
pub fn verify(cfg: &ExperimentConfig, overrides: &Overrides, log: &mut dyn Write) -> Result<Vec<SuiteOutcome>> {
    let mut cfg = cfg.clone();
    overrides.apply(&mut cfg);
    let v = cfg.verify.clone();
    if v.coverage_runs == 0 || v.safety_runs == 0 {
        return Err(Error::Config("verify runs must be >= 1".into()));
    }
    if v.coverage_horizon == 0 || v.equivalence_instances == 0 || v.equivalence_samples == 0 {
        return Err(Error::Config("verify horizon, instances and samples must be >= 1".into()));
    }
    let check = !overrides.unchecked_assumptions;
    let threads = cfg.run.threads;

    let mut coverage_cfg = cfg.clone();
    coverage_cfg.run.horizon = v.coverage_horizon;
    if let Some(delta) = v.coverage_delta {
        coverage_cfg.filter.delta = delta;
    }
    coverage_cfg.filter.mode = FilterMode::Bypass;
    let coverage = suites::coverage_suite(&coverage_cfg.closed_loop(check)?, v.coverage_runs, threads)?;
    let safety = suites::safety_suite(&cfg.closed_loop(check)?, v.safety_runs, threads)?;
    let equivalence = suites::equivalence_suite(v.equivalence_instances, v.equivalence_samples, cfg.run.seed)?;

    let outcomes = vec![coverage.outcome, safety.outcome, equivalence.outcome()];
    let out = cfg.run.out.clone();
    let mut wtr = csv::Writer::from_writer(create(&out, "verify.csv")?);
    wtr.write_record(["suite", "passed", "detail"])?;
    for o in &outcomes {
        writeln!(log, "{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail)?;
        wtr.write_record([o.name, if o.passed { "true" } else { "false" }, &o.detail])?;
    }
    wtr.flush()?;
    Ok(outcomes)
}
