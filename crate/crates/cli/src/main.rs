//! `spinectx`: train, run and inspect the spine localization network.

mod commands;
mod memory;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spinectx_core::network::DilationPreset;

/// Prefix of the single line printed on failure.
pub const ERROR_PREFIX: &str = "spinectx: error:";

#[derive(Debug, Parser)]
#[command(name = "spinectx", version, about = "Residual 3-D U-Net with a dilated context block for spine CT")]
pub struct Cli {
    /// Worker threads for inference and kernels (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Single worker and fixed ordering; repeated runs give identical files.
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on generated phantoms and write checkpoints and the epoch log.
    Train(TrainArgs),
    /// Segment one volume: writes probability and mask NIfTI files.
    Infer(InferArgs),
    /// Score a checkpoint against truth masks and write a metrics CSV.
    Eval(EvalArgs),
    /// Time repeated sliding-window inference and record peak memory.
    Bench(BenchArgs),
    /// Write a Grad-CAM heat map of the bottleneck for one volume.
    Gradcam(GradcamArgs),
    /// Print layer shapes, parameter counts and dilation extents.
    Summary(SummaryArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training recipe JSON; omitted fields keep the desk-scale defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dilation preset of the context block.
    #[arg(long, value_name = "NAME")]
    pub preset: Option<DilationPreset>,
    /// Seed for initialization and patch sampling.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory for best.scru, last.scru and train_log.csv.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Input volume (.nii, .nii.gz or raw .json).
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Model config JSON that must agree with the checkpoint.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Probability above which a voxel is foreground.
    #[arg(long, value_name = "P", default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Directory of `<id>.<ext>` images with `<id>_mask.<ext>` truth masks.
    /// Without it the recipe's held-out phantoms are scored.
    #[arg(long = "in", value_name = "DIR")]
    pub input: Option<PathBuf>,
    /// Recipe JSON naming the held-out phantoms.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "P", default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Volume to time. Without it a phantom is generated.
    #[arg(long = "in", value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Phantom spec JSON for the generated volume.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed of the generated phantom.
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub seed: u64,
    /// Number of timed runs.
    #[arg(long, value_name = "N", default_value_t = 3)]
    pub repeat: usize,
    /// Directory for bench.csv.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SummaryArgs {
    /// Model config JSON; omitted fields take the defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "NAME")]
    pub preset: Option<DilationPreset>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPINECTX_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(commands::Outcome::Done) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Partial(n)) => {
            eprintln!("{ERROR_PREFIX} {n} case(s) failed");
            ExitCode::from(3)
        }
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("{ERROR_PREFIX} {msg}");
            ExitCode::FAILURE
        }
    }
}
