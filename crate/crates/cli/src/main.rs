mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{
    AugmentArgs, EvalArgs, FilterArgs, LossesArgs, MergeArgs, QaArgs, RunArgs, SynthArgs, TileArgs, W2sArgs,
};

/// Curate weak-teacher nucleus masks, augment overlaps and assess
/// segmentation quality on multiplex whole-slide images.
#[derive(Parser)]
#[command(name = "wsqa", version)]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut a slide and its masks into overlapping tiles.
    Tile(TileArgs),
    /// Remove union, duplicate and dim masks from tiles.
    Filter(FilterArgs),
    /// Paste overlapping nuclei into filtered tiles.
    Augment(AugmentArgs),
    /// Coverage, purity and cell counts.
    Qa(QaArgs),
    /// AJI+ and PQ against ground truth.
    Eval(EvalArgs),
    /// Weak-to-strong diagnostics and the error bound.
    W2s(W2sArgs),
    /// Stitch per-tile masks into one slide-level set.
    Merge(MergeArgs),
    /// Run the configured pipeline.
    Run(RunArgs),
    /// Gradient checks of the attention and loss kernels.
    Losses(LossesArgs),
    /// Write a synthetic slide with planted mask errors.
    Synth(SynthArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = rayon_workers(cli.workers) {
        eprintln!("error: {e}");
        return ExitCode::from(commands::EXIT_CONFIG);
    }
    let result = match cli.command {
        Command::Tile(a) => commands::tile(a),
        Command::Filter(a) => commands::filter(a),
        Command::Augment(a) => commands::augment(a),
        Command::Qa(a) => commands::qa(a),
        Command::Eval(a) => commands::eval(a),
        Command::W2s(a) => commands::w2s(a),
        Command::Merge(a) => commands::merge(a),
        Command::Run(a) => commands::run(a, cli.workers),
        Command::Losses(a) => commands::losses(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", render(&f.error));
            ExitCode::from(f.code)
        }
    }
}

fn rayon_workers(n: usize) -> anyhow::Result<()> {
    if n > 0 {
        wsqa_core::pipeline::set_global_workers(n)?;
    }
    Ok(())
}

/// The error chain, skipping causes already spelled out by their parent.
fn render(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !prev.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        prev = msg;
    }
    out
}
