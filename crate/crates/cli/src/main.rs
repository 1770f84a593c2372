//! `brwi`: predictions, simulations, fits and random-walk checks driven by a
//! JSON experiment config.
//!
//! Exit codes: 0 ok, 1 configuration, 2 model assumption, 3 resource,
//! 4 verification failure.

// `!(x < y)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(
    name = "brwi",
    version,
    about = "Branching random walks through interfaces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Regime, speed and log-correction of the configured schedule.
    Predict,
    /// Ensembles of M_n over the n-ladder, as CSV plus a manifest.
    Simulate,
    /// Speed and log-coefficient fit of ensemble CSVs.
    Fit,
    /// Ballot, bridge and local-window probabilities.
    Ballot,
    /// Exact many-to-one and ballot gates.
    #[command(name = "verify-many-to-one", alias = "verify")]
    Verify,
}

/// Every way a command can fail, by exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Core(brwi::Error),
    Verification(String),
}

impl From<brwi::Error> for Failure {
    fn from(e: brwi::Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        use brwi::Error::*;
        match self {
            Failure::Config(_) => 1,
            Failure::Verification(_) => 4,
            Failure::Core(e) => match e.root_cause() {
                AssumptionViolated(_) | NoRoot(_) => 2,
                ExactBlowup { .. } => 3,
                _ => 1,
            },
        }
    }

    fn kind(&self) -> &'static str {
        use brwi::Error::*;
        match self {
            Failure::Config(_) => "config",
            Failure::Verification(_) => "verification",
            Failure::Core(e) => match e.root_cause() {
                Invalid(_) => "invalid",
                Domain(_) => "domain",
                NoRoot(_) => "no_root",
                AssumptionViolated(_) => "assumption_violated",
                TooLarge { .. } => "too_large",
                ExactBlowup { .. } => "exact_blowup",
                InsufficientData(_) => "insufficient_data",
                Replicate { .. } => "replicate",
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Config(m) | Failure::Verification(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        None if cli.command == Command::Verify => ExperimentConfig::default(),
        None => return Err(Failure::Config("--config is required".into())),
    };
    if cli.command == Command::Verify && config.verify.is_none() {
        config.verify = Some(Default::default());
    }
    if let Some(seed) = cli.seed {
        config.override_seed(seed);
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if cli.jobs > 0 {
        // only the first call can succeed, and this is the only call
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global();
    }
    let config = load_config(cli)?;
    let ctx = commands::Context {
        config: &config,
        out: cli.out.as_deref(),
        jobs: cli.jobs,
    };
    ctx.echo_config()?;
    match cli.command {
        Command::Predict => commands::predict(&ctx),
        Command::Simulate => commands::simulate(&ctx),
        Command::Fit => commands::fit(&ctx),
        Command::Ballot => commands::ballot(&ctx),
        Command::Verify => commands::verify(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            if f.exit_code() == 2 {
                println!(
                    "{}",
                    json!({ "error": { "kind": f.kind(), "message": f.message() } })
                );
            }
            ExitCode::from(f.exit_code())
        }
    }
}
