//! `maskdiff` command-line driver.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use maskdiff::trainer::Ablation;

/// Invalid flags or configuration, reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "maskdiff", version, about = "Mask-conditioned diffusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML config; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory. Must be empty or absent unless --overwrite is given.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for every random draw of the command (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub overwrite: bool,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::ALL
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| format!("expected one of none, adaptive, refine, both; got {s:?}"))
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a procedural image/mask dataset.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n_train: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n_test: Option<u64>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the segmentation oracle on a dataset's train split.
    TrainOracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the mask-conditioned denoiser.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Oracle checkpoint, required when refinement is enabled.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint written with the same settings.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate one image per mask; writes a dataset tree.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// PGM mask files or directories of them.
        #[arg(long, required = true, num_args = 1..)]
        masks: Vec<PathBuf>,
        /// DDIM subsequence length.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Score generated samples against their conditioning masks with the oracle.
    EvalFidelity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        /// Dataset whose test-split masks condition the samples.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Compare real-only and real+synthetic segmenter training.
    EvalDownstream {
        #[command(flatten)]
        common: Common,
        /// Dataset providing the real train split (and the test split by default).
        #[arg(long)]
        real: PathBuf,
        /// Dataset of synthetic items; every item is used for training.
        #[arg(long)]
        synth: Option<PathBuf>,
        /// Dataset providing the test split.
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Finite-difference checks of every analytic gradient.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<maskdiff::Error>() {
        Some(maskdiff::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData {
            common,
            n_train,
            n_test,
            size,
        } => commands::synth_data(&common, n_train, n_test, size),
        Command::TrainOracle { common, data, epochs } => commands::train_oracle(&common, &data, epochs),
        Command::Train {
            common,
            data,
            oracle,
            ablation,
            steps,
            resume,
        } => commands::train(&common, &data, oracle.as_deref(), ablation, steps, resume.as_deref()),
        Command::Sample {
            common,
            ckpt,
            masks,
            steps,
            eta,
        } => commands::sample(&common, &ckpt, &masks, steps, eta),
        Command::EvalFidelity {
            common,
            ckpt,
            oracle,
            data,
            n_samples,
        } => commands::eval_fidelity(&common, &ckpt, &oracle, &data, n_samples),
        Command::EvalDownstream {
            common,
            real,
            synth,
            test,
        } => commands::eval_downstream(&common, &real, synth.as_deref(), test.as_deref()),
        Command::GradCheck { common } => commands::grad_check(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
