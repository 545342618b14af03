//! `weedshift` command-line tool.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "weedshift", version, about = "Tile-based weed classification under domain shift")]
struct Cli {
    /// TOML run config; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for tiling and evaluation (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    /// Relative output paths are resolved against this directory.
    #[arg(long, global = true, env = "WEEDSHIFT_OUT")]
    out_root: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cut annotated images into labelled tiles with feature vectors.
    Tile(TileArgs),
    /// Assign tiles from one or more tiled subsets to train and val.
    Split(SplitArgs),
    /// Train a model with one of the adaptation strategies.
    Train(TrainArgs),
    /// Score a checkpoint on every subdomain of a dataset.
    Eval(EvalArgs),
    /// Write a synthetic multi-source benchmark.
    Synth(SynthArgs),
    /// Summarise several training runs.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct TileArgs {
    /// CSV with header image_id,x_min,y_min,x_max,y_max,class,plant_id.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Directory of PGM/PPM images named `<image_id>.{pgm,ppm,pnm}`.
    #[arg(long)]
    pub images: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Subset (domain) id written to every tile.
    #[arg(long, default_value = "default")]
    pub domain: String,
    #[arg(long)]
    pub tile: Option<u32>,
    #[arg(long)]
    pub r_th: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    /// Tiled dataset directory; repeat once per subset.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// `pooled` or `per_subset`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Source dataset directory (train and val splits); repeatable.
    #[arg(long = "source", required = true)]
    pub sources: Vec<PathBuf>,
    /// Target dataset directory; labels are only used for monitoring.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// `vanilla`, `m2s2da` or `m3sda_beta`.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// `sgd` or `adam`.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub unfreeze: Option<usize>,
    #[arg(long)]
    pub lora_rank: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory; every trainable tile is scored, per domain.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub target_shift: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directory written by `train`; repeatable.
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
