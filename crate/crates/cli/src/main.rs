//! `slotenergy`: data generation, training, inference and evaluation.

mod commands;
mod config;
mod images;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "slotenergy", version, about = "Energy-based scene decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command.
#[derive(Args, Clone, Debug)]
pub struct Common {
    /// TOML configuration file, applied over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory. Defaults to a folder under $SLOTENERGY_OUTPUT_ROOT.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Configuration overrides as `--dotted.key value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Combine,
    Subtract,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test datasets.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model, optionally resuming the run in the output directory.
    Train {
        /// Training dataset file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Per-slot reconstructions, masks and per-step grids for some scenes.
    Decompose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated scene indices.
        #[arg(long, default_value = "0,1,2,3")]
        scenes: String,
        #[command(flatten)]
        common: Common,
    },
    /// Infer under the sum or difference of two scenes' energies.
    Manipulate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Dataset holding scene b; defaults to `--data`.
        #[arg(long)]
        data_b: Option<PathBuf>,
        #[arg(long)]
        a: usize,
        #[arg(long)]
        b: usize,
        #[arg(long, value_enum)]
        mode: Mode,
        #[command(flatten)]
        common: Common,
    },
    /// Foreground ARI, probes and count generalization.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Number of sampler seeds to average over.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Score ground-truth masks instead of the model's.
        #[arg(long)]
        oracle: bool,
        /// Dataset used to fit linear probes; scores go on `--data`.
        #[arg(long)]
        probe_train: Option<PathBuf>,
        /// Dataset with more objects, scored with `--k-test` slots.
        #[arg(long)]
        ood: Option<PathBuf>,
        #[arg(long)]
        k_test: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Grid over sampler settings.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write a parameters-only copy of a checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::Train { data, resume, common } => commands::train(&data, resume, &common),
        Command::Decompose {
            checkpoint,
            data,
            scenes,
            common,
        } => commands::decompose(&checkpoint, &data, &scenes, &common),
        Command::Manipulate {
            checkpoint,
            data,
            data_b,
            a,
            b,
            mode,
            common,
        } => commands::manipulate(&checkpoint, &data, data_b.as_deref(), a, b, mode, &common),
        Command::Eval {
            checkpoint,
            data,
            seeds,
            oracle,
            probe_train,
            ood,
            k_test,
            common,
        } => commands::eval(
            &checkpoint,
            &data,
            &commands::EvalFlags {
                seeds,
                oracle,
                probe_train,
                ood,
                k_test,
            },
            &common,
        ),
        Command::Ablate { checkpoint, data, common } => commands::ablate(&checkpoint, &data, &common),
        Command::Export { checkpoint, out } => commands::export(&checkpoint, &out),
    }
}
