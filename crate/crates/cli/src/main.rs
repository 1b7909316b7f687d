//! `fsuda`: data generation, training, pseudo-labeling, evaluation,
//! prediction and visualization from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use freespace_uda::dataio::SplitRole;
use freespace_uda::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "fsuda", version, about = "Cross-modality domain adaptation for freespace detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic source/target dataset.
    GenData(GenDataArgs),
    /// Train for the configured number of self-training rounds.
    Train(TrainArgs),
    /// Write pseudo labels for target-train from a checkpoint.
    Pseudo(PseudoArgs),
    /// Score a checkpoint on a labeled split.
    Eval(EvalArgs),
    /// Write foreground probability maps and masks.
    Predict(PredictArgs),
    /// Write attention and discriminator maps as grayscale PNGs.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Generator config (JSON); without it a default two-domain set is built.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image height and width of the default set.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 64)]
    source: usize,
    #[arg(long, default_value_t = 64)]
    target_train: usize,
    #[arg(long, default_value_t = 32)]
    target_eval: usize,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset directory, or a directory of per-domain datasets.
    #[arg(long, env = "FSUDA_DATA_ROOT")]
    data_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Flat JSON config with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ablation preset used as the base before the config file.
    #[arg(long)]
    preset: Option<String>,
    /// `key=value` with a dotted key; repeatable, last one wins.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "lambda1-s")]
    lambda1_s: Option<f64>,
    #[arg(long = "lambda2-s")]
    lambda2_s: Option<f64>,
    #[arg(long = "lambda3-s")]
    lambda3_s: Option<f64>,
    #[arg(long = "lambda1-t")]
    lambda1_t: Option<f64>,
    #[arg(long = "lambda2-t")]
    lambda2_t: Option<f64>,
    #[arg(long = "lambda3-t")]
    lambda3_t: Option<f64>,
    #[arg(long)]
    lambda4: Option<f64>,
    /// Checkpoint of a finished round to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CheckpointArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PseudoArgs {
    #[command(flatten)]
    common: CheckpointArgs,
    /// Confidence threshold; defaults to the checkpoint's.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value = "target-train")]
    data: SplitRole,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CheckpointArgs,
    #[arg(long, default_value = "target-eval")]
    data: SplitRole,
    /// Also write TP/FN/FP overlays per image.
    #[arg(long)]
    overlays: bool,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    common: CheckpointArgs,
    #[arg(long, default_value = "target-eval")]
    data: SplitRole,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct VisualizeArgs {
    #[command(flatten)]
    common: CheckpointArgs,
    #[arg(long, default_value = "target-eval")]
    data: SplitRole,
    /// Number of samples to render.
    #[arg(long, default_value_t = 4)]
    limit: usize,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Pseudo(a) => commands::pseudo(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Visualize(a) => commands::visualize(a),
    };
    match result {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
