use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Ternary vision transformer training, quantization and analysis.
#[derive(Debug, Parser)]
#[command(name = "ternvit", version, propagate_version = true)]
pub struct Cli {
    /// Seed for every random choice (overrides `schedule.seed`; 42 when
    /// neither is given).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train under a single precision mode.
    Train(TrainArgs),
    /// 8-bit proxy phase followed by ternary phase.
    Progressive(ProgressiveArgs),
    /// Run the five-pipeline ablation and optional phase-split sweep.
    Ablate(AblateArgs),
    /// Loss and accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Requantize checkpoint weights without training.
    Quantize(QuantizeArgs),
    /// Model size and compression ratio for a policy.
    Size(SizeArgs),
    /// CAM/SDAM statistics and, optionally, layer Hessian eigenvalues.
    Diagnose(DiagnoseArgs),
    /// 2-D loss landscape around a checkpoint.
    Landscape(LandscapeArgs),
    /// Time the GEMM kernels.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Real32,
    Int8,
    Ternary,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Write the loss trace here instead of standard output.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProgressiveArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Phase splits `A:B` for the split sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub splits: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Run configuration whose `[data]` section names the dataset.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Train)]
    pub split: Split,
    /// Policy preset or policy file; defaults to the checkpoint's policy.
    #[arg(long)]
    pub policy: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Policy preset (real32, int8, ternary, ternary-layerwise, ternary-all)
    /// or a TOML policy file.
    #[arg(long)]
    pub policy: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SizeArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Policy preset or file; defaults to the config's `[quantization]`.
    #[arg(long)]
    pub policy: Option<String>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Also estimate the top Hessian eigenvalue of every linear layer.
    #[arg(long)]
    pub hessian: bool,
    /// Dataset for the Hessian (run configuration file).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Samples used for the Hessian.
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Checkpoint whose per-layer minimum CAM defines dead channels.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Write cam.csv, sdam.csv and hessian.csv into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LandscapeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Grid points per axis (odd).
    #[arg(long)]
    pub resolution: usize,
    /// Half-width of the grid in direction units.
    #[arg(long)]
    pub span: f64,
    /// Dataset (run configuration file).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long)]
    pub policy: Option<String>,
    /// Write the grid CSV here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// GEMM shapes `MxKxN`, comma separated.
    #[arg(long, value_delimiter = ',', required_unless_present = "model")]
    pub shapes: Vec<String>,
    /// Benchmark the block GEMMs of this run configuration's model instead.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Images per batch for `--model`.
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    /// Kernels to run (dense_f32, ternary_f32, ternary_i8, int8_i8).
    #[arg(long, value_delimiter = ',')]
    pub kernels: Vec<String>,
}
