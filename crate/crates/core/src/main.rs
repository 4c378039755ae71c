use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use safelearn::commands::{self, Overrides};
use safelearn::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "safelearn", version, about = "Safe learning and control of linear systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one or more closed-loop runs and write traces.
    Run(Common),
    /// Run one long trajectory and write the uncertainty decay curve.
    Decay(Common),
    /// Run the coverage, safety and equivalence suites.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use n instead of n + m in the prior term of the confidence radius.
    #[arg(long)]
    strict_paper_beta: bool,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, hide = true)]
    unchecked_assumptions: bool,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            runs: self.runs,
            out: self.out.clone(),
            threads: self.threads,
            strict_paper_beta: self.strict_paper_beta,
            unchecked_assumptions: self.unchecked_assumptions,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Run(c) | Command::Decay(c) | Command::Verify(c) => c,
    };
    let cfg = match ExperimentConfig::load(&common.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let overrides = common.overrides();
    let mut stdout = std::io::stdout();
    let result = match &cli.command {
        Command::Run(_) => commands::run(&cfg, &overrides, &mut stdout).map(|_| true),
        Command::Decay(_) => commands::decay(&cfg, &overrides, &mut stdout).map(|_| true),
        Command::Verify(_) => {
            commands::verify(&cfg, &overrides, &mut stdout).map(|outcomes| outcomes.iter().all(|o| o.passed))
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
