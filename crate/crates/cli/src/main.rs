//! `sessrec`: experiments for session-wise generative retrieval — data
//! generation, training (full and incremental), evaluation, retrieval,
//! gradient checks, ablations, and scaling sweeps.

mod commands;
mod config;
mod metrics;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "sessrec", version, about = "Session-wise generative retrieval experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (key=value lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event log.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train on the full dataset and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train incrementally over rotating user buckets.
    PitRun {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on held-out final-day sessions.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path (default: <output_dir>/checkpoint.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Retrieve top-k items for one user, printed as JSON.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// User id to retrieve for.
        #[arg(long)]
        user: String,
        /// Override retrieval.k.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Compare analytic gradients against finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Four runs, each with one component toggled off.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Train/evaluate across model dims and summarize the trend.
    Scale {
        #[command(flatten)]
        common: Common,
        /// Comma-separated model dims.
        #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
        dims: Vec<usize>,
    },
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| CliError::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData { common } => commands::gen_data(&resolve(common)?),
        Command::Train { common } => commands::train(&resolve(common)?),
        Command::PitRun { common } => commands::pit_run(&resolve(common)?),
        Command::Eval { common, checkpoint } => {
            commands::eval(&resolve(common)?, checkpoint.as_deref())
        }
        Command::Retrieve {
            common,
            checkpoint,
            user,
            k,
        } => commands::retrieve(&resolve(common)?, checkpoint.as_deref(), user, *k),
        Command::GradCheck { common } => commands::grad_check_cmd(&resolve(common)?),
        Command::Ablate { common } => commands::ablate(&resolve(common)?),
        Command::Scale { common, dims } => commands::scale(&resolve(common)?, dims),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code() as u8)
        }
    }
}
