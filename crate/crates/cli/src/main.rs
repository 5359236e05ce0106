//! `dode`: sampling, distillation, ablation and trajectory analysis from a TOML config.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 configuration or usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dode_core::{DodeError, Result};

use crate::commands::Which;
use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "dode", version, about = "Diffusion ODE samplers with distilled single-parameter variants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's `output`, else `dode-out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the configured solver and writes endpoints, trajectory and metrics.
    Sample(RunArgs),
    /// Fits the per-step weights against a finer teacher run and evaluates them.
    Distill(RunArgs),
    /// Repeats distillation across scale or batch size.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// `scale` or `batch`.
        #[arg(long)]
        axis: Option<String>,
    },
    /// Writes cosine-similarity, norm and coordinate traces of a saved trajectory.
    Analyze {
        /// Trajectory CSV or binary dump.
        #[arg(long)]
        trajectory: PathBuf,
        /// `cosine`, `norm`, `coords` or `all`.
        #[arg(long, default_value = "all")]
        which: String,
        /// Sample index for the coordinate trace.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Coordinate pair for the trace, as `i,j`.
        #[arg(long)]
        coords: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("dode-out"));
    Ok((cfg, out))
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let bad = || DodeError::Config(format!("coordinate pair '{s}' should look like 0,1"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("DODE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| DodeError::Config(format!("DODE_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| DodeError::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Sample(a) => {
            let (cfg, out) = load(&a)?;
            commands::sample(&cfg, &out)
        }
        Command::Distill(a) => {
            let (cfg, out) = load(&a)?;
            commands::distill_cmd(&cfg, &out)
        }
        Command::Ablate { run, axis } => {
            let (cfg, out) = load(&run)?;
            commands::ablate_cmd(&cfg, axis.as_deref(), &out)
        }
        Command::Analyze {
            trajectory,
            which,
            sample,
            coords,
            out,
        } => {
            let which: Which = which.parse()?;
            let coords = coords.as_deref().map(parse_pair).transpose()?;
            commands::analyze(&trajectory, which, sample, coords, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
