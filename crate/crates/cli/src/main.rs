//! `mil`: generate synthetic bags, train and sweep sampling policies, run
//! two-stage fine-tuning, evaluate predictions and render heatmaps.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mil", version, about = "Attention MIL with within-bag random sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key=value` file overriding defaults; unknown keys are errors
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed for every random stream
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Print progress to standard error
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Development manifest (TSV)
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Held-out test manifest (TSV)
    #[arg(long, value_name = "FILE")]
    test: PathBuf,
    /// Number of folds [default: 10; e2e always uses one 80/20 split]
    #[arg(long)]
    k: Option<usize>,
    /// Sampling policy: full | frac:P | count:K [default: full]
    #[arg(long)]
    sample: Option<String>,
    /// Learning rate [default: 2e-4]
    #[arg(long)]
    lr: Option<f64>,
    /// Epoch budget [default: 200]
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Epochs without validation-loss improvement before stopping [default: 20]
    #[arg(long)]
    patience: Option<usize>,
    /// Parallel folds or sweep cells; results do not depend on it [default: 1]
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic focal or diffuse dataset
    Gen {
        #[command(flatten)]
        common: Common,
        /// focal | diffuse
        #[arg(long, default_value = "focal")]
        regime: String,
        /// Witness rate of focal positive bags
        #[arg(long, default_value_t = 0.05)]
        witness: f64,
        /// Witness mean shift along the signal direction
        #[arg(long, default_value_t = 3.0)]
        sep: f64,
        /// Per-instance shift of diffuse positive bags [default: 1.0]
        #[arg(long)]
        shift: Option<f64>,
        /// Development bags per class
        #[arg(long, default_value_t = 100)]
        bags: usize,
        /// Test bags per class
        #[arg(long, default_value_t = 50)]
        test_bags: usize,
        /// Instances per bag
        #[arg(long, default_value_t = 200)]
        size: usize,
        /// Feature dimension
        #[arg(long, default_value_t = 32)]
        dim: usize,
    },
    /// k-fold training with one sampling policy
    Train(TrainArgs),
    /// k-fold training for every policy of a grid
    Sweep {
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated policies [default: count:8,frac:0.02,frac:0.06,frac:0.1,frac:0.3,frac:0.6,frac:0.9,full]
        #[arg(long)]
        grid: Option<String>,
    },
    /// Two-stage training: frozen encoder, then partial unfreezing at lr/10 (stage-1 lr 2e-4 gives 2e-5)
    E2e {
        #[command(flatten)]
        train: TrainArgs,
        /// Bootstrap resamples for the confidence intervals [default: 2000]
        #[arg(long)]
        resamples: Option<usize>,
        /// Stage-2 feature jitter [default: 0.1]
        #[arg(long)]
        jitter: Option<f64>,
        /// Comma-separated groups unfrozen in stage 2 [default: encoder.block2 and everything after it, except encoder.norm]
        #[arg(long)]
        unfreeze: Option<String>,
        /// Scale the first-block weights of input feature 0 by this factor before training
        #[arg(long)]
        misalign: Option<f64>,
    },
    /// AUC, ROC and bootstrap interval of a predictions CSV (bag_id,score,label)
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        predictions: PathBuf,
        /// Bootstrap resamples [default: 2000]
        #[arg(long)]
        resamples: Option<usize>,
        /// Confidence level [default: 0.95]
        #[arg(long)]
        level: Option<f64>,
    },
    /// Attention heatmap of one bag under a checkpoint
    Heatmap {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        bag: PathBuf,
        /// Writes PREFIX.pgm and PREFIX.csv
        #[arg(long, value_name = "PREFIX")]
        out: PathBuf,
    },
    /// Finite-difference check of the full model's gradients
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Central-difference step
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 12)]
        bag_size: usize,
        /// Pass threshold on the maximum relative error
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<milsample::MilError> for Failure {
    fn from(e: milsample::MilError) -> Self {
        match e {
            milsample::MilError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
