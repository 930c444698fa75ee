//! `drobas`: run the newsvendor and portfolio experiments, cross-validate the
//! radius, report tolerances, or solve a single instance.
//!
//! Exit status: 0 success, 1 runtime failure, 2 config error, 3 data ingestion error.

mod config;
mod run;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Ingestion(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Ingestion(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Ingestion(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<drobas::DroError> for CliError {
    fn from(e: drobas::DroError) -> Self {
        match e {
            drobas::DroError::Config(_) => CliError::Config(e.to_string()),
            drobas::DroError::Ingestion(_) => CliError::Ingestion(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "drobas", version, about = "DRO with Bayesian ambiguity sets: experiments and solves")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Newsvendor experiment over methods × ε × M × replicates.
    Newsvendor(Common),
    /// Sliding-window portfolio experiment on weekly returns.
    Portfolio(Common),
    /// k-fold cross-validation of ε.
    Cv(Common),
    /// Minimum radius and tolerance bounds of a posterior, as one CSV row.
    Tolerances(Common),
    /// One solve at one radius; prints the solution as JSON.
    SolveOne(Common),
    /// Parse and validate a config without running it.
    ValidateConfig {
        #[command(flatten)]
        common: Common,
        /// Experiment kind, when the config has no `experiment` field.
        #[arg(long)]
        experiment: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value: dotted.path=value (value parsed as JSON, else string).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Master seed (overrides the config's `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Newsvendor(c) => run::experiment("newsvendor", c),
        Command::Portfolio(c) => run::experiment("portfolio", c),
        Command::Cv(c) => run::experiment("cv", c),
        Command::Tolerances(c) => run::experiment("tolerances", c),
        Command::SolveOne(c) => run::experiment("solve-one", c),
        Command::ValidateConfig { common, experiment } => {
            config::load(common.config.as_deref(), experiment.as_deref(), &common.sets, common.seed).map(|cfg| {
                println!("ok: {} config is valid", cfg.kind());
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let what = match e {
                CliError::Config(_) => "config error",
                CliError::Ingestion(_) => "data error",
                CliError::Runtime(_) => "error",
            };
            eprintln!("drobas: {what}: {e}");
            ExitCode::from(e.code())
        }
    }
}
