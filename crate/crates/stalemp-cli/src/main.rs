//! `stalemp` command-line front end: train, sweep, diagnose, synth.

mod config;
mod diagnostics;
mod runner;
mod sweep;

use clap::{Parser, Subcommand};

use config::{CommonArgs, RunConfig};

#[derive(Parser)]
#[command(
    name = "stalemp",
    version,
    about = "Staleness-aware historical-embedding message-passing trainer"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes metrics.jsonl, checkpoints, and summary.json
    Train(CommonArgs),
    /// Run an ablation grid and aggregate final accuracies into one CSV
    Sweep(sweep::SweepArgs),
    /// Check a saved model + cache snapshot against the layerwise error bound
    Diagnose(CommonArgs),
    /// Generate a synthetic dataset into edge-list / feature / label files
    Synth(CommonArgs),
}

fn main() {
    if let Some(threads) = stalemp::par::env_thread_cap() {
        stalemp::par::init_thread_pool(threads);
    }
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.cmd {
        Cmd::Train(args) => {
            let cfg = RunConfig::from_args(&args)?;
            let outcome = runner::cmd_train(&cfg)?;
            println!(
                "trained {} epochs: best val acc {:.4} at epoch {}; outputs in {}",
                cfg.epochs, outcome.best_val_acc, outcome.best_epoch, cfg.out
            );
            Ok(0)
        }
        Cmd::Sweep(args) => sweep::cmd_sweep(&args),
        Cmd::Diagnose(args) => {
            let cfg = RunConfig::from_args(&args)?;
            diagnostics::cmd_diagnose(&cfg)
        }
        Cmd::Synth(args) => {
            let cfg = RunConfig::from_args(&args)?;
            runner::cmd_synth(&cfg)?;
            Ok(0)
        }
    }
}
