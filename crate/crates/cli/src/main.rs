//! `flatvae`: generate data, train, analyse and interpolate flat-manifold VAEs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Errors surfaced to the shell, each with a fixed exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] flatvae::Error),
}

impl CliError {
    /// 1 usage or configuration, 2 data or file format, 3 numerics.
    pub fn exit_code(&self) -> u8 {
        use flatvae::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(e) => match e {
                E::Config(_) | E::Contract(_) | E::UnsupportedDimension { .. } => 1,
                E::Format { .. } | E::Io(_) | E::ShapeMismatch { .. } => 2,
                E::TrainingFault { .. }
                | E::DegenerateMetric(_)
                | E::GraphConnectivity { .. }
                | E::Domain { .. } => 3,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "flatvae", version, about = "Flat-manifold variational auto-encoders")]
pub struct Cli {
    /// TOML run configuration; keys left out take the preset's values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialisation, batching and analysis.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a generated dataset as CSV.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint and a training log.
    Train(TrainArgs),
    /// Geometry statistics and field exports for a checkpoint.
    Analyze(AnalyzeArgs),
    /// Decode a straight latent line.
    Interpolate(InterpolateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Dataset generator; only `pendulum` is available.
    pub kind: String,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Output file name inside the output directory.
    #[arg(long, default_value = "pendulum.csv")]
    pub file: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Preset supplying architecture and hyper-parameters.
    #[arg(long)]
    pub preset: Option<String>,
    /// Training data as delimited text (overrides the configured source).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub beta_init: Option<f64>,
    /// Evaluate the flatness penalty at the encodings themselves.
    #[arg(long)]
    pub no_mixup: bool,
    /// Use this value for c² instead of the batch estimate.
    #[arg(long)]
    pub fixed_c2: Option<f64>,
    /// Continue from a checkpoint up to the configured step budget.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub checkpoint: PathBuf,
    /// Data to encode for bounding boxes and endpoint pairs; without it the
    /// prior samples are used.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub graph_nodes: Option<usize>,
    #[arg(long)]
    pub graph_neighbours: Option<usize>,
    #[arg(long)]
    pub segments: Option<usize>,
    /// Grid side for field CSVs (planar latents only).
    #[arg(long)]
    pub grid: Option<usize>,
    /// Distance-field centre `z1,z2`; may be repeated.
    #[arg(long = "centre", value_parser = commands::parse_point, allow_hyphen_values = true)]
    pub centres: Vec<commands::Point>,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    pub checkpoint: PathBuf,
    /// Start point as comma-separated latent coordinates.
    #[arg(long, value_parser = commands::parse_point, allow_hyphen_values = true)]
    pub from: Option<commands::Point>,
    #[arg(long, value_parser = commands::parse_point, allow_hyphen_values = true)]
    pub to: Option<commands::Point>,
    /// Start point as the encoded mean of this row of `--data`.
    #[arg(long)]
    pub from_index: Option<usize>,
    #[arg(long)]
    pub to_index: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of segments M; the output has M + 1 rows.
    #[arg(long, default_value_t = 100)]
    pub segments: usize,
    #[arg(long, default_value = "interpolation.csv")]
    pub file: String,
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
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
