//! `contrastive` — generate data, train, evaluate, soup, gradient-check and ablate.
//!
//! Exit codes: 0 success, 1 usage error (help printed), 2 runtime failure.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "contrastive", version, about = "Desk-scale contrastive embedding training")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct GlobalArgs {
    /// JSON config file; flags override its fields
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output file or directory (command-specific)
    #[arg(long, short = 'o', global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Worker threads for read-only parallel sections (evaluation scoring)
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark manifest (default out: manifest.jsonl)
    GenData,
    /// Train an encoder (default out: out.ckpt)
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split (default out dir: .)
    Eval(EvalArgs),
    /// Average adapters of several checkpoints and merge them into the base
    Soup(SoupArgs),
    /// Check loss gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Run an ablation grid (default out dir: .)
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Train on this manifest instead of generating one from the config
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Start from this checkpoint's weights and temperatures
    #[arg(long, value_name = "CKPT")]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Evaluate on this manifest's held-out split instead of a generated one
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SoupArgs {
    /// Checkpoints sharing one base projection
    #[arg(value_name = "CKPT")]
    pub checkpoints: Vec<PathBuf>,
    /// Comma-separated weights summing to 1 (uniform when omitted)
    #[arg(long, value_delimiter = ',', value_name = "W,W,...")]
    pub weights: Option<Vec<f64>>,
    /// delta-average (merged into the base) or factor-svd (kept as an adapter)
    #[arg(long, value_name = "NAME")]
    pub strategy: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_name = "N")]
    pub trials: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Built-in grid used when no --config is given: table4 or soup
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
    /// Number of seeds (starting at --seed, or the config's first seed)
    #[arg(long, value_name = "N")]
    pub seeds: Option<usize>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: std::error::Error + Send + Sync + 'static> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_help());
            return ExitCode::from(1);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_help());
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
