//! `tryon`: dataset generation, training, self-synthesis, filtering, inference and evaluation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use tryon_core::checkpoint::CheckpointError;
use tryon_core::config::ConfigError;
use tryon_core::pipeline::PipelineError;
use tryon_core::toyworld::ToyworldError;
use tryon_core::ModelError;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "TRYON_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "tryon", version, about = "Instruction-guided virtual try-on on a procedural paper-doll world")]
pub struct Cli {
    /// JSON config (flat dotted or nested keys). Defaults to $TRYON_CONFIG.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Base settings the config file and overrides apply to.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Config override, repeatable: `--set stage1.steps=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Model and step counts sized for one CPU core.
    Desk,
    /// Reference model dimensions and step counts.
    Default,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a dataset and its manifest.
    GenData(GenDataArgs),
    /// Train one stage.
    Train(TrainArgs),
    /// Generate self-synthesized candidates from a trained checkpoint.
    Synthesize(SynthesizeArgs),
    /// Re-run the two-step filter over a candidate manifest.
    Filter(FilterArgs),
    /// Sample one image.
    Infer(InferArgs),
    /// Evaluate a checkpoint on held-out samples.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of every loss term.
    GradCheck(GradCheckArgs),
    /// Stage I, synthesis, filtering, merge and Stage II in one go.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Samples per real-data task (overrides `data.counts`).
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Training manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for metrics, checkpoint and config.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint of the same stage.
    #[arg(long, conflicts_with = "init")]
    pub resume: Option<PathBuf>,
    /// Start from another stage's weights with fresh optimizer state.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    /// Multi-garment samples from reconstructed flats.
    #[value(alias = "multi-garment")]
    B1,
    /// Model-to-model samples from generated people.
    #[value(alias = "model-to-model")]
    B2,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Real-data manifest supplying source people and garments.
    #[arg(long)]
    pub sources: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Candidate manifest written by `synthesize`.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Where to write the re-filtered manifest (defaults to in place).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Real manifest to merge the accepted candidates into.
    #[arg(long, requires = "merged")]
    pub real: Option<PathBuf>,
    /// Directory of the merged manifest.
    #[arg(long)]
    pub merged: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Task name, e.g. `single_garment`.
    #[arg(long)]
    pub task: String,
    /// Reference PNGs in instruction order.
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    pub refs: Vec<PathBuf>,
    #[arg(long)]
    pub pose: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Garment slot named in the instruction.
    #[arg(long, default_value = "top")]
    pub slot: String,
    /// Requested view (multi-view only).
    #[arg(long, default_value = "front")]
    pub view: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluate this manifest instead of the generated held-out set.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Report path (JSON).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write output/target strips for the first samples of each task here.
    #[arg(long)]
    pub images: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
    /// Entries differenced per parameter tensor.
    #[arg(long, default_value_t = 4)]
    pub per_param: usize,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub out: PathBuf,
}

/// Failures the CLI raises itself.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Failed(String),
}

const USAGE: u8 = 1;
const VALIDATION: u8 = 2;
const RUNTIME: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) => USAGE,
                CliError::Validation(_) => VALIDATION,
                CliError::Failed(_) => RUNTIME,
            };
        }
        if cause.is::<ConfigError>() {
            return VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            match e {
                PipelineError::Validation(_) | PipelineError::TaskMismatch { .. } => return VALIDATION,
                PipelineError::Checkpoint(CheckpointError::ConfigMismatch(_)) => return VALIDATION,
                _ => {}
            }
        }
        if let Some(CheckpointError::ConfigMismatch(_)) = cause.downcast_ref::<CheckpointError>() {
            return VALIDATION;
        }
        if let Some(ModelError::Validation(_) | ModelError::RefCount { .. }) = cause.downcast_ref::<ModelError>() {
            return VALIDATION;
        }
        if let Some(ToyworldError::Validation(_)) = cause.downcast_ref::<ToyworldError>() {
            return VALIDATION;
        }
    }
    RUNTIME
}

fn kind_name(code: u8) -> &'static str {
    match code {
        USAGE => "usage",
        VALIDATION => "validation",
        _ => "runtime",
    }
}

/// One JSON object on one line.
fn report(code: u8, message: &str) {
    let line = serde_json::json!({ "error": kind_name(code), "code": code, "message": message });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let text = e.to_string();
            let summary: Vec<&str> =
                text.lines().map(str::trim).take_while(|l| !l.starts_with("Usage:")).filter(|l| !l.is_empty()).collect();
            report(USAGE, summary.join(" ").trim_start_matches("error: "));
            return ExitCode::from(USAGE);
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            if code == USAGE {
                use clap::CommandFactory;
                let _ = Cli::command().print_help();
                eprintln!();
            }
            let message: Vec<String> = err.chain().map(|c| c.to_string()).collect();
            report(code, &message.join(": "));
            ExitCode::from(code)
        }
    }
}
