//! `gradsqueeze`: deterministic parameter-server SGD simulator with
//! compressed, error-compensated communication.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gradsqueeze_cli::config::{apply_overrides, parse_config, CliOverrides};
use gradsqueeze_cli::runner::{parse_bandwidths, resolve_out_dir, run_batch, RunOptions};
use gradsqueeze_cli::{presets, HarnessError};
use gradsqueeze_core::algorithms::Algorithm;

#[derive(Parser)]
#[command(
    name = "gradsqueeze",
    about = "Deterministic parameter-server SGD simulator with compressed, error-compensated communication",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Run an experiment batch from a config file or a shipped preset.
    Run {
        /// Path to a batch config (TOML).
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Name of a shipped preset (see `gradsqueeze presets`).
        #[arg(long)]
        preset: Option<String>,
        /// Output directory (overrides the file's `batch.out_dir`).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Override the algorithm for every batch member
        /// (doublesqueeze, memsgd, qsgd, topk_sgd, vanilla).
        #[arg(long)]
        algorithm: Option<String>,
        /// Override the worker count for every batch member.
        #[arg(long)]
        workers: Option<usize>,
        /// Override the iteration count for every batch member.
        #[arg(long)]
        iterations: Option<usize>,
        /// Override the learning rate (constant) for every batch member.
        #[arg(long)]
        lr: Option<f64>,
        /// Override the seed for every batch member.
        #[arg(long)]
        seed: Option<u64>,
        /// Run the invariant checkers after each experiment (on/off).
        #[arg(long, default_value = "on")]
        checks: String,
        /// Comma-separated bandwidth grid (bits/s) for the per-iteration
        /// time table, e.g. "1e6,1e7,1e9".
        #[arg(long)]
        bandwidth_sweep: Option<String>,
    },
    /// List the shipped presets.
    Presets,
}

fn load_config_text(
    config: Option<PathBuf>,
    preset: Option<String>,
) -> Result<String, HarnessError> {
    match (config, preset) {
        (Some(path), None) => std::fs::read_to_string(&path).map_err(|e| {
            HarnessError::Config(format!("cannot read config `{}`: {e}", path.display()))
        }),
        (None, Some(name)) => presets::by_name(&name).map(str::to_string).ok_or_else(|| {
            HarnessError::Config(format!(
                "unknown preset `{name}`; available: {}",
                presets::all()
                    .iter()
                    .map(|(n, _, _)| *n)
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        }),
        (None, None) => Err(HarnessError::Config(
            "provide either --config <file> or --preset <name>".into(),
        )),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Presets => {
            for (name, description, _) in presets::all() {
                println!("{name:<24} {description}");
            }
            Ok(())
        }
        Command::Run {
            config,
            preset,
            out_dir,
            algorithm,
            workers,
            iterations,
            lr,
            seed,
            checks,
            bandwidth_sweep,
        } => {
            let text = load_config_text(config, preset)?;
            let mut batch = parse_config(&text)?;

            let algorithm = match algorithm {
                Some(name) => Some(Algorithm::from_name(&name).ok_or_else(|| {
                    HarnessError::Config(format!(
                        "unknown algorithm `{name}`; expected one of {}",
                        gradsqueeze_cli::runner::algorithm_names()
                    ))
                })?),
                None => None,
            };
            apply_overrides(
                &mut batch,
                &CliOverrides {
                    algorithm,
                    workers,
                    iterations,
                    lr,
                    seed,
                },
            )?;

            let checks = match checks.as_str() {
                "on" | "true" | "1" => true,
                "off" | "false" | "0" => false,
                other => {
                    return Err(HarnessError::Config(format!(
                        "--checks expects on/off, got `{other}`"
                    )))
                }
            };
            let bandwidth_sweep = match bandwidth_sweep {
                Some(list) => parse_bandwidths(&list)?,
                None => Vec::new(),
            };

            let opts = RunOptions {
                out_dir: resolve_out_dir(&batch, out_dir),
                checks,
                bandwidth_sweep,
            };
            let results = run_batch(&batch, &opts)?;
            println!(
                "wrote {} run(s) to {}",
                results.outcomes.len(),
                results.out_dir.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
