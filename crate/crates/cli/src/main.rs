//! `porecli` — synthesize data, train, fine-tune, detect and evaluate.
//!
//! Settings are resolved as built-in defaults, then the `--config` JSON file,
//! then command-line flags; the resolved settings are written to
//! `resolved_config.json` in the output directory before any work starts.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "porecli", version, about = "Domain-adversarial fingerprint pore detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON file with command settings; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic source/target dataset with ground truth.
    Synth(commands::SynthArgs),
    /// Train the pore network adversarially on a dataset manifest.
    Train(commands::TrainArgs),
    /// Re-train only the output layer on labelled patches.
    Finetune(commands::FinetuneArgs),
    /// Detect pores in images.
    Detect(commands::DetectArgs),
    /// Score detections at one threshold against ground truth.
    Eval(commands::EvalArgs),
    /// Sweep thresholds and write an ROC curve.
    Roc(commands::RocArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Detect(a) => commands::detect(a),
        Command::Eval(a) => commands::eval(a),
        Command::Roc(a) => commands::roc(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                domainpore::Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
