//! Command-line driver: structure listings, cost tables, gradient checks,
//! scan benchmarks and toy training.

pub mod commands;
pub mod config;
pub mod exit;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ulike", version, about = "U-shaped selective-scan segmentation networks")]
pub struct Cli {
    /// TOML run configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides network.variant.
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Root under which per-run output directories are created.
    #[arg(long, global = true, env = "ULIKE_OUT", default_value = "ulike-runs")]
    pub out_root: PathBuf,
    /// Overwrite an existing output directory.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the layer table of the configured network.
    Describe {
        #[arg(long, num_args = 3, value_names = ["D", "H", "W"])]
        input_shape: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value_t = DescribeFormat::Text)]
        emit: DescribeFormat,
    },
    /// Parameter and FLOP comparison across variants.
    Count {
        #[arg(long, num_args = 3, value_names = ["D", "H", "W"])]
        input_shape: Option<Vec<usize>>,
        /// Comma-separated entries: variant names, direction presets or msv1..msv4.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long, value_enum, default_value_t = Emit::Md)]
        emit: Emit,
    },
    /// Central finite-difference gradient checks.
    Gradcheck {
        /// `all` or a comma-separated list of component names.
        #[arg(long, default_value = "all")]
        component: String,
        /// Negate the analytic input gradient to exercise the checker.
        #[arg(long, hide = true)]
        inject_bug: bool,
    },
    /// Time one scan mode and compare it with the other.
    BenchScan(BenchArgs),
    /// Train on the synthetic set and write logs and a checkpoint.
    Train(TrainArgs),
    /// Dice report of a checkpoint on the validation set.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Score the ground truth against itself instead of a model.
        #[arg(long)]
        oracle: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DescribeFormat {
    Text,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Csv,
    Md,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScanModeArg {
    Seq,
    Par,
}

#[derive(Clone, Debug, Args)]
pub struct BenchArgs {
    #[arg(long = "L", default_value_t = 4096)]
    pub l: usize,
    #[arg(long = "N", default_value_t = 16)]
    pub n: usize,
    #[arg(long = "C", default_value_t = 32)]
    pub c: usize,
    #[arg(long, value_enum, default_value_t = ScanModeArg::Par)]
    pub mode: ScanModeArg,
}

#[derive(Clone, Debug, Default, Args)]
pub struct TrainArgs {
    /// Overrides train.epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Optimizer steps per epoch
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Overrides train.lr
    #[arg(long)]
    pub lr: Option<f64>,
    /// Overrides train.batch_size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Size of the synthetic training set
    #[arg(long)]
    pub train_samples: Option<usize>,
    /// Size of the synthetic validation set
    #[arg(long)]
    pub val_samples: Option<usize>,
}

/// Runs a parsed command line and returns the process exit status.
pub fn main_with(cli: Cli) -> i32 {
    match commands::run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit::code(&e)
        }
    }
}
