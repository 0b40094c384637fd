//! `robsur` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use robsur::{ErrorCategory, SurError};

use config::{Estimator, Experiment, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Sur(#[from] SurError),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Sur(e) => match e.category() {
                ErrorCategory::Config => "config",
                ErrorCategory::Numeric => "numeric",
                ErrorCategory::Degenerate => "degenerate",
            },
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.category() {
            "config" => 2,
            "numeric" => 3,
            _ => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "robsur", version, about = "Robust estimation and inference for SUR models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// CSV file, or "grunfeld" for the bundled data.
    #[arg(long, global = true)]
    dataset: Option<String>,
    /// Block specification "name: response ~ x1 + x2" (repeatable).
    #[arg(long = "block", global = true)]
    blocks: Vec<String>,
    /// Do not add an intercept to each block.
    #[arg(long, global = true)]
    no_intercept: bool,
    #[arg(long, global = true, value_enum)]
    estimator: Option<Estimator>,
    #[arg(long, global = true)]
    breakdown: Option<f64>,
    #[arg(long, global = true)]
    efficiency: Option<f64>,
    /// Number of bootstrap replicates.
    #[arg(long = "n-bootstrap", visible_alias = "N", global = true)]
    n_bootstrap: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of elemental starting subsamples.
    #[arg(long, global = true)]
    subsamples: Option<usize>,
    #[arg(long, global = true)]
    level: Option<f64>,
    /// Quantile for the diagnostic cutoffs.
    #[arg(long, global = true)]
    quantile: Option<f64>,
    /// Restriction "coef block:var = value" or "equal b1:v1 b2:v2" (repeatable).
    #[arg(long, global = true)]
    restrict: Vec<String>,
    /// JSON report path (stdout if absent).
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// CSV sidecar path.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the model.
    Fit,
    /// Asymptotic and bootstrap confidence intervals for the MM coefficients.
    Ci,
    /// Test a linear restriction on the coefficients.
    TestCoef,
    /// Test whether the error covariance is diagonal.
    TestDiag,
    /// Residual and predictor distances with outlier classification.
    Diagnose,
    /// Run a simulation experiment described in the config.
    Simulate {
        #[arg(long, value_enum)]
        experiment: Option<Experiment>,
        /// Test for level/power experiments, e.g. lambda_mm.
        #[arg(long)]
        test: Option<String>,
        /// Override the repetitions of every grid cell.
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Ci => "ci",
            Command::TestCoef => "test-coef",
            Command::TestDiag => "test-diag",
            Command::Diagnose => "diagnose",
            Command::Simulate { .. } => "simulate",
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &cli.dataset {
        cfg.dataset = Some(d.clone());
    }
    if !cli.blocks.is_empty() {
        cfg.blocks = cli.blocks.clone();
    }
    if cli.no_intercept {
        cfg.intercept = false;
    }
    macro_rules! set {
        ($($f:ident => $t:ident),*) => { $(if let Some(v) = cli.$f.clone() { cfg.$t = v; })* };
    }
    set!(estimator => estimator, breakdown => breakdown, efficiency => efficiency, n_bootstrap => n_bootstrap,
         seed => seed, subsamples => n_subsamples, level => level, quantile => quantile);
    if !cli.restrict.is_empty() {
        cfg.restrict = cli.restrict.clone();
    }
    if cli.output.is_some() {
        cfg.output = cli.output.clone();
    }
    if cli.csv.is_some() {
        cfg.csv = cli.csv.clone();
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    if let Command::Simulate { experiment, test, repetitions, cache_dir } = &cli.command {
        if let Some(e) = experiment {
            cfg.simulation.experiment = *e;
        }
        if let Some(t) = test {
            cfg.simulation.test = t.clone();
        }
        if let Some(r) = repetitions {
            for g in &mut cfg.simulation.grid {
                g.repetitions = *r;
            }
        }
        if cache_dir.is_some() {
            cfg.simulation.cache_dir = cache_dir.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot set up {t} threads: {e}")))?;
    }
    let report = commands::run_command(cli.command.name(), &cfg)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Config(e.to_string()))? + "\n";
    match &cfg.output {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Config(format!("cannot write {}: {e}", p.display())))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.category(), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::from(e.exit_code())
        }
    }
}
