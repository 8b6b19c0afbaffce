//! `cmfd` — generate, attack, train on, and score copy-move forgery data.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cmfd", version, about = "Copy-move forgery detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic forgery dataset split into train/val/test.
    Gen(GenArgs),
    /// Re-encode a dataset under one photometric or compression attack.
    Attack(AttackArgs),
    /// Train a model and keep the best validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write CSV reports.
    Eval(EvalArgs),
    /// Train one arm per value of a single hyperparameter.
    Sweep(SweepArgs),
    /// Train the four standard architecture/objective arms.
    Ablate(AblateArgs),
    /// Predict forgery maps for a single image.
    Infer(InferArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    /// Total number of samples across all splits.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; gains train/, val/ and test/ subdirectories.
    #[arg(long)]
    out: PathBuf,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Comma-separated train,val,test fractions; must sum to 1.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    split_fractions: String,
}

#[derive(clap::Args)]
struct AttackArgs {
    /// Dataset to attack (a directory with manifest.txt).
    #[arg(long = "in")]
    input: PathBuf,
    /// Attack tag such as JC5, NA2 or BASE.
    #[arg(long)]
    spec: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Dataset root containing train/ and val/.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override one config key, e.g. --set gamma=100. Repeatable; applied
    /// after the file, so flags win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Checkpoint to resume from (not supported; training restarts).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to score (a directory with manifest.txt).
    #[arg(long)]
    data: PathBuf,
    /// Directory for the CSV reports.
    #[arg(long)]
    report: PathBuf,
    /// Also write per-image prediction maps under <report>/maps/.
    #[arg(long)]
    export_maps: bool,
    /// F1 above which an image counts as correctly detected.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Copy, Clone, ValueEnum)]
enum SweepAxis {
    Gamma,
    Depth,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    axis: SweepAxis,
    /// Comma-separated values for the chosen axis.
    #[arg(long)]
    values: String,
    #[arg(long)]
    config: PathBuf,
    /// Dataset root containing train/, val/ and test/.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(clap::Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset root containing train/, val/ and test/.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(clap::Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image to analyze (any size; maps come back at its resolution).
    #[arg(long)]
    image: PathBuf,
    /// Directory for <stem>_binary.png and <stem>_tri.png.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(args) => commands::cmd_gen(args),
        Command::Attack(args) => commands::cmd_attack(args),
        Command::Train(args) => commands::cmd_train(args),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::Sweep(args) => commands::cmd_sweep(args),
        Command::Ablate(args) => commands::cmd_ablate(args),
        Command::Infer(args) => commands::cmd_infer(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
