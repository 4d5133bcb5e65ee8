use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use topmil_core::config::{ExperimentConfig, RawConfig, SweepPlan, SynthConfig};
use topmil_core::experiment::{self, RunError};

#[derive(Parser)]
#[command(
    name = "topmil",
    about = "Weakly supervised multiple-instance learning experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment end to end and emit its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every combination of a config with list-valued fields.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate synthetic slides, masks, and a tile manifest.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_raw(path: &PathBuf) -> Result<RawConfig, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        RunError::Config(topmil_core::config::ConfigError {
            field: path.display().to_string(),
            message: e.to_string(),
        })
    })?;
    RawConfig::parse(&text).map_err(RunError::from)
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let raw = load_raw(&config)?;
            let resolved = ExperimentConfig::resolve(&raw, out, seed)?;
            let outcome = experiment::run(&resolved)?;
            println!(
                "run complete: auc {} f1 {} -> {}",
                outcome.metrics.auc,
                outcome
                    .metrics
                    .f1
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "undefined".into()),
                outcome.out_dir.display()
            );
            Ok(())
        }
        Command::Sweep { config } => {
            let raw = load_raw(&config)?;
            let plan = SweepPlan::resolve(&raw)?;
            let outcome = experiment::sweep(&plan)?;
            for row in &outcome.rows {
                match &row.metrics {
                    Some(m) => println!(
                        "size {} target {} t {}: auc {} f1 {}",
                        row.size,
                        row.target,
                        row.t_percent,
                        m.auc,
                        m.f1.map(|v| v.to_string())
                            .unwrap_or_else(|| "undefined".into())
                    ),
                    None => println!(
                        "size {} target {} t {}: FAILED ({})",
                        row.size,
                        row.target,
                        row.t_percent,
                        row.error.as_deref().unwrap_or("unknown")
                    ),
                }
            }
            println!("summary: {}", outcome.summary_path.display());
            if outcome.any_failed {
                Err(RunError::Train("one or more sweep children failed".into()))
            } else {
                Ok(())
            }
        }
        Command::Synth { config } => {
            let raw = load_raw(&config)?;
            let resolved = SynthConfig::resolve(&raw)?;
            let output = experiment::synth(&resolved)?;
            println!(
                "generated {} slides, manifest {}",
                output.slide_ids.len(),
                output.manifest_path.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
