//! `foltr` command line: run experiments and summarize their logs.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use foltr_core::experiment::{self, ExperimentConfig, Preset};
use log::info;

#[derive(Parser)]
#[command(name = "foltr", version, about = "Federated OLTR unlearning simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, unlearn and write per-run logs.
    Run {
        /// TOML configuration; keys override the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from a named preset (`desk`).
        #[arg(long)]
        preset: Option<Preset>,
        /// Output directory; overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate finished runs into summary.json and summary.md.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn run(config: Option<PathBuf>, preset: Option<Preset>, out: Option<PathBuf>) -> Result<bool> {
    let base = preset.map_or_else(ExperimentConfig::default, ExperimentConfig::preset);
    let mut cfg = match &config {
        Some(path) => {
            experiment::load_config_over(path, &base).with_context(|| format!("loading {}", path.display()))?
        }
        None => {
            base.validate()?;
            base
        }
    };
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    info!("writing to {}", cfg.output_dir.display());
    let report = experiment::run_experiment(&cfg, &cfg.output_dir)?;
    for (fold, seed) in &report.skipped {
        println!("skipped {fold}/seed-{seed} (already complete)");
    }
    for (fold, seed) in &report.completed {
        println!("completed {fold}/seed-{seed}");
    }
    for (fold, seed, err) in &report.failed {
        eprintln!("failed {fold}/seed-{seed}: {err}");
    }
    Ok(report.failed.is_empty())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, preset, out } => run(config, preset, out),
        Command::Summarize { input } => experiment::summarize(&input)
            .map(|s| {
                println!(
                    "summarized {} run(s) into {}",
                    s.runs,
                    input.join("summary.json").display()
                );
                true
            })
            .map_err(Into::into),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
