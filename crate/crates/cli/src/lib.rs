//! `cxr`: data preparation, training, evaluation and the reader study from
//! one binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
//! input), 3 runtime failure.

mod config;
mod pipeline;
mod study;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::ConfigFile;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandResult {
    pub code: u8,
    /// Printed to stdout on success and to stderr otherwise.
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<cxr_core::trainer::TrainError> for CliError {
    fn from(e: cxr_core::trainer::TrainError) -> Self {
        use cxr_core::trainer::TrainError::*;
        match e {
            NonFiniteLoss { .. } | Bias(_) => Self::runtime(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<cxr_study::ServiceError> for CliError {
    fn from(e: cxr_study::ServiceError) -> Self {
        use cxr_study::ServiceError::*;
        match e {
            Io(..) => Self::runtime(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

/// Successful outcome of a subcommand.
#[derive(Debug, Default)]
pub struct Output {
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(
    name = "cxr",
    version,
    about = "Chest X-ray Covid-19 workbench: site-debiased training and reader studies"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Random seed; overrides the seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML config with optional [train], [synth] and [simulate] sections.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-site dataset with a site shortcut.
    Synth(pipeline::SynthArgs),
    /// Per-site positive/negative and CR/DR counts of a manifest.
    ReportComposition(pipeline::CompositionArgs),
    /// Stratified k-fold split of a manifest.
    Split(pipeline::SplitArgs),
    /// Pretrain the encoder on the multi-label findings task.
    Pretrain(pipeline::PretrainArgs),
    /// Train the Covid-19 head on frozen encoder features.
    TrainHead(pipeline::TrainHeadArgs),
    /// K-fold cross-validation of baseline and FairKL heads.
    CrossValidate(pipeline::CrossValidateArgs),
    /// Balanced accuracy and ROC AUC from a predictions file.
    Evaluate(pipeline::EvaluateArgs),
    /// Reader-study service and analysis.
    #[command(subcommand)]
    Study(study::StudyCommand),
}

pub fn run<I, T>(argv: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            return CommandResult {
                code,
                summary: e.render().to_string(),
                artifacts: vec![],
            };
        }
    };
    init_logging(cli.common.verbose);
    match dispatch(cli) {
        Ok(out) => CommandResult {
            code: 0,
            summary: out.summary,
            artifacts: out.artifacts,
        },
        Err(e) => CommandResult {
            code: e.code,
            summary: format!("error: {}\n", e.message),
            artifacts: vec![],
        },
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    // a second call (tests running several commands) keeps the first subscriber
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .try_init();
}

fn dispatch(cli: Cli) -> Result<Output, CliError> {
    let config = ConfigFile::load(cli.common.config.as_deref())?;
    let seed = cli.common.seed;
    match cli.command {
        Command::Synth(a) => pipeline::synth(a, &config, seed),
        Command::ReportComposition(a) => pipeline::report_composition(a),
        Command::Split(a) => pipeline::split(a, seed),
        Command::Pretrain(a) => pipeline::pretrain(a, &config, seed),
        Command::TrainHead(a) => pipeline::train_head(a, &config, seed),
        Command::CrossValidate(a) => pipeline::cross_validate(a, &config, seed),
        Command::Evaluate(a) => pipeline::evaluate(a),
        Command::Study(c) => study::run(c, &config, seed),
    }
}
