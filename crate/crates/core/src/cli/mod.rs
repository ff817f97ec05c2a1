//! The `ecoc` command line.
//!
//! Exit codes: `0` success, `1` a failed run or failed check, `2` a usage
//! error.

mod commands;
mod manifest;

pub use manifest::{sha256_file, sha256_hex, Artifact, RunManifest};

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use crate::attacks::AttackKind;
use crate::data::BlobSpec;

/// Environment variable holding the number of attack workers.
pub const WORKERS_ENV: &str = "ECOC_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "ecoc", version, about = "ECOC ensembles and targeted attacks against them")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print a Hadamard codeword matrix and its minimum distance.
    Codes(CodesArgs),
    /// Train the one-hot base network, then fine-tune the ECOC ensemble.
    Train(TrainArgs),
    /// Attack correctly classified test images.
    Attack(AttackArgs),
    /// Tables and curves from one or more results files.
    Report(ReportArgs),
    /// Run the built-in verification suite.
    Selftest,
    /// Rerun a command from its manifest and compare output checksums.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct CodesArgs {
    #[arg(long)]
    pub classes: usize,
    /// Defaults to the smallest power of two at least `classes`.
    #[arg(long)]
    pub length: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Gaussian blobs, e.g. `M=4,dims=16,sep=8`.
    #[arg(long, value_name = "SPEC", required_unless_present = "idx_images", conflicts_with = "idx_images")]
    pub synthetic: Option<BlobSpec>,
    /// IDX image file, optionally gzipped.
    #[arg(long, value_name = "PATH", requires = "idx_labels")]
    pub idx_images: Option<PathBuf>,
    /// IDX label file, optionally gzipped.
    #[arg(long, value_name = "PATH", requires = "idx_images")]
    pub idx_labels: Option<PathBuf>,
    /// Share of the data held out as the test split.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BottomArg {
    Frozen,
    Shared,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub epochs: usize,
    /// Fine-tuning epochs; defaults to `--epochs`.
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,
    #[arg(long, value_enum, default_value_t = BottomArg::Frozen)]
    pub bottom: BottomArg,
    /// Codeword length; defaults to the smallest power of two at least `M`.
    #[arg(long)]
    pub code_length: Option<usize>,
    /// Convolution channels for image data.
    #[arg(long, value_delimiter = ',', default_value = "4,8")]
    pub channels: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    /// Dense widths for flat data.
    #[arg(long, value_delimiter = ',', default_value = "32")]
    pub dense_widths: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    /// Output directory.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_parser = parse_kind)]
    pub kind: Option<AttackKind>,
    /// `λ₁,n,m,c`.
    #[arg(long, default_value = "1e-3,10,1000,0", allow_hyphen_values = true)]
    pub params: String,
    /// Step size.
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub images: usize,
    /// Explicit test-split indices instead of sampling.
    #[arg(long, value_delimiter = ',')]
    pub image_ids: Option<Vec<usize>>,
    /// Target-class training images averaged by LOTS.
    #[arg(long, default_value_t = 50)]
    pub lots_pool: usize,
    /// TOML job file; its keys override the flags above.
    #[arg(long)]
    pub job: Option<PathBuf>,
    /// Results CSV.
    #[arg(long, default_value = "results.csv")]
    pub out: PathBuf,
    /// Append rows to an existing results file.
    #[arg(long)]
    pub append: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Results CSV files, merged in order.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
    #[arg(long, default_value_t = crate::evaluation::DEFAULT_HISTOGRAM_BINS)]
    pub bins: usize,
    /// PSNR thresholds `start:stop:step` for the success curve.
    #[arg(long, default_value = "0:60:1")]
    pub psnr_thresholds: String,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

fn parse_kind(s: &str) -> Result<AttackKind, String> {
    s.parse::<AttackKind>().map_err(|e| e.to_string())
}

#[derive(Debug)]
pub(crate) enum CliError {
    /// Reported with the subcommand's usage line and exit code 2.
    Usage { command: &'static str, message: String },
    /// Exit code 1.
    Failure(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Failure(e.into())
    }
}

pub(crate) fn usage(command: &'static str, message: impl Into<String>) -> CliError {
    CliError::Usage {
        command,
        message: message.into(),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::dispatch(cli.command, &argv) {
        Ok(code) => code,
        Err(CliError::Usage { command, message }) => {
            eprintln!("error: {message}");
            let mut cmd = Cli::command();
            cmd.build();
            if let Some(sub) = cmd.find_subcommand_mut(command) {
                eprintln!("\n{}", sub.render_usage());
            }
            eprintln!("\nFor more information, try '--help'.");
            2
        }
        Err(CliError::Failure(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
