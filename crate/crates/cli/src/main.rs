//! `ra` — reversed auto-encoder anomaly detection.
//!
//! Four subcommands cover the full workflow: `synth` renders the benchmark
//! dataset, `train` fits a model on healthy images, `score` turns a trained
//! checkpoint plus images into anomaly maps, and `evaluate` aggregates saved
//! maps into a metrics report.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 data error,
//! 4 numeric divergence during training.

mod config;
mod evaluate;
mod score;
mod synth;
mod train;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ra", version, about = "Reversed auto-encoder anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic phantom benchmark with ground-truth masks
    Synth(synth::SynthArgs),
    /// Train on healthy images (modes: ra, sivae, vae)
    Train(train::TrainArgs),
    /// Score images with a trained checkpoint: maps, heatmaps, reconstructions
    Score(score::ScoreArgs),
    /// Aggregate saved anomaly maps into an evaluation report
    Evaluate(evaluate::EvaluateArgs),
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> ra_core::Result<()> {
    config::init_worker_pool()?;
    match cli.command {
        Command::Synth(args) => synth::run(args),
        Command::Train(args) => train::run(args),
        Command::Score(args) => score::run(args),
        Command::Evaluate(args) => evaluate::run(args),
    }
}
