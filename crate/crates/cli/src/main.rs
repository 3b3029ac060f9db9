mod commands;
mod plot;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Filter-normalized convolutions, atmospheric corruption benchmarks and a
/// small training/diagnostics harness.
#[derive(Debug, Parser)]
#[command(name = "atmosconv", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// key=value file; values here override defaults and are overridden by flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra key=value override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a corrupted copy of a set plus its replay manifest.
    Corrupt(CorruptArgs),
    /// Train a model and write its checkpoint and per-epoch log.
    Train(TrainArgs),
    /// Accuracy report over clean and corrupted sets.
    Eval(EvalArgs),
    /// Checkerboard / difference-of-Gaussians illumination demo.
    DemoChecker(DemoArgs),
    /// Weight-ratio histogram, per-filter error table and guided-backprop similarity.
    Diagnose(DiagnoseArgs),
    /// Compare analytic and finite-difference gradients of a model's loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    #[command(flatten)]
    pub common: Common,
    /// Set path, `synthetic:<n>[:<side>[:<seed>]]`, or `cifar-test:<dir>`.
    #[arg(long)]
    pub input: Option<String>,
    /// One of C, L, B, S (or D_C, ...).
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub severity: Option<f64>,
    /// Output format: raw, png or cifar.
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<String>,
    /// Separate validation set; otherwise `val_fraction` of the data is held out.
    #[arg(long)]
    pub val: Option<String>,
    #[arg(long)]
    pub architecture: Option<String>,
    #[arg(long)]
    pub conv_mode: Option<String>,
    #[arg(long)]
    pub norm_layer: Option<String>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub low_shot_fraction: Option<f64>,
    #[arg(long)]
    pub augment_fraction: Option<f64>,
    #[arg(long)]
    pub reg_strength: Option<f64>,
    /// Directory of a sibling run whose seeds, data and schedule are reused.
    #[arg(long)]
    pub paired_with: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Clean set from which D and its four corrupted versions are built.
    #[arg(long)]
    pub benchmark: Option<String>,
    /// Additional named set, NAME=SPEC; repeatable.
    #[arg(long = "eval-set", value_name = "NAME=SPEC")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub severity: Option<f64>,
    /// Also report accuracy in 9 contrast bins of the clean set.
    #[arg(long)]
    pub contrast_bins: bool,
    /// Also report the flip rate between D and this variant at the given severity.
    #[arg(long)]
    pub flip_variant: Option<String>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub tiles: Option<usize>,
    #[arg(long)]
    pub tile_px: Option<usize>,
    /// Half-range of the illumination ramp (0.5 means gains from 0.5 to 1.5).
    #[arg(long)]
    pub ramp: Option<f64>,
    /// Constant offset for the stability check.
    #[arg(long)]
    pub offset: Option<f64>,
    #[arg(long)]
    pub kernel_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Set used for the per-filter error table (typically a corrupted set).
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Filter response score: mean (mean |activation|) or max.
    #[arg(long)]
    pub response: Option<String>,
    /// Conv layer for guided-backprop similarity.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Number of images for guided-backprop similarity.
    #[arg(long)]
    pub images: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Check this checkpoint instead of a freshly built model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub architecture: Option<String>,
    #[arg(long)]
    pub conv_mode: Option<String>,
    #[arg(long)]
    pub norm_layer: Option<String>,
    #[arg(long)]
    pub probes: Option<usize>,
    #[arg(long)]
    pub reg_strength: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Corrupt(a) => commands::corrupt(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::DemoChecker(a) => commands::demo_checker(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            commands::exit_code_for(&e)
        }
    }
}
