//! `longidiff`: phantom generation, schedule verification, training,
//! sampling, evaluation and slice export.
//!
//! Exit codes: 0 success, 1 a verification check failed, 2 configuration
//! error, 3 data error, 4 numerical failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use longidiff::ErrorClass;

#[derive(Parser)]
#[command(
    name = "longidiff",
    version,
    about = "Conditional diffusion for longitudinal volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic longitudinal phantom dataset.
    GenData(GenDataArgs),
    /// Check a noise schedule and the sampler against closed-form oracles.
    Verify(VerifyArgs),
    /// Train the denoiser on a dataset written by gen-data.
    Train(TrainArgs),
    /// Generate a follow-up volume from a source volume.
    Sample(SampleArgs),
    /// Compare generated volumes against references.
    Eval(EvalArgs),
    /// Write the central axial slice of a volume as PNG or PGM.
    ExportSlice(ExportSliceArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// TOML phantom spec; defaults are used for missing keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub subjects: usize,
    /// Yearly visits per subject, including the baseline.
    #[arg(long, default_value_t = 3)]
    pub visits: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 1000)]
    pub timesteps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_start: f64,
    #[arg(long, default_value_t = 0.02)]
    pub beta_end: f64,
    /// Number of sampler chains for the moment check.
    #[arg(long, default_value_t = 10_000)]
    pub chains: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for CSV diagnostics and the run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// TOML training config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub timesteps: Option<usize>,
    #[arg(long)]
    pub beta_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
    #[arg(long)]
    pub eval_subjects: Option<usize>,
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Normalized source volume (LVOL).
    #[arg(long)]
    pub source: PathBuf,
    /// Interval in years; 0 is allowed.
    #[arg(long)]
    pub delta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output volume (LVOL).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the mid slice of the output as an image.
    #[arg(long)]
    pub png: Option<PathBuf>,
    /// Save every k-th intermediate volume next to the output.
    #[arg(long)]
    pub trajectory_every: Option<usize>,
    /// Clamp the predicted clean volume to [-1, 1] at every reverse step.
    #[arg(long)]
    pub clip_denoised: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Label for the summary row.
    #[arg(long, default_value = "longidiff")]
    pub method: String,
    #[arg(long, default_value_t = 7)]
    pub window: usize,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub projection_seed: u64,
}

#[derive(Args)]
pub struct ExportSliceArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// `.png` or `.pgm`.
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Verify(a) => commands::verify(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Eval(a) => commands::eval(a),
        Command::ExportSlice(a) => commands::export_slice(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
