//! `visens`: runs the Monte Carlo, bound-sweep, gauge-check and
//! gravity-initialization experiments from a TOML configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use vi_sensitivity::experiment::{
    run_bounds_sweep, run_gauge_check, run_gravity_init_experiment, run_montecarlo, to_json,
    write_text, ExperimentConfig, ScenarioKind,
};

/// Exit code for configuration and runtime errors.
const EXIT_ERROR: u8 = 1;
/// Exit code when more trials diverged than the configured threshold allows.
const EXIT_DIVERGED: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "visens",
    version,
    about = "Sensitivity experiments for vision-aided inertial navigation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte Carlo study of alignment convergence.
    Montecarlo(RunArgs),
    /// Indistinguishable-set bounds over the configured ε and excitation grid.
    Bounds(RunArgs),
    /// Applies the configured gauges and checks them against the bounds.
    GaugeCheck(RunArgs),
    /// Accel-bias absorption of a misaligned gravity initialization.
    GravityInit(RunArgs),
    /// Prints the default configuration as TOML.
    DefaultConfig,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// TOML configuration (defaults are used when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of Monte Carlo trials, overriding the configuration.
    #[arg(long)]
    trials: Option<usize>,
    /// Output file (standard output when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn load_config(args: &RunArgs, scenario: ScenarioKind) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.scenario = scenario;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = args.trials {
        cfg.trials = trials;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_text(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let (args, scenario) = match &cli.command {
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml()?);
            return Ok(0);
        }
        Command::Montecarlo(a) => (a, ScenarioKind::Montecarlo),
        Command::Bounds(a) => (a, ScenarioKind::BoundsSweep),
        Command::GaugeCheck(a) => (a, ScenarioKind::GaugeCheck),
        Command::GravityInit(a) => (a, ScenarioKind::GravityInit),
    };
    let cfg = load_config(args, scenario)?;
    let json = args.format == Format::Json;
    let out = args.out.as_deref();
    match scenario {
        ScenarioKind::Montecarlo => {
            let stats = run_montecarlo(&cfg)?;
            emit(
                out,
                &if json {
                    to_json(&stats)?
                } else {
                    stats.to_csv()
                },
            )?;
            let std = stats.converged_std;
            eprintln!(
                "{} trials, {} diverged; converged std translation [{:.3e}, {:.3e}, {:.3e}] m, \
                 rotation [{:.3e}, {:.3e}, {:.3e}] rad",
                stats.trials, stats.diverged, std[0], std[1], std[2], std[3], std[4], std[5]
            );
            if stats.divergence_fraction() > cfg.divergence_threshold {
                eprintln!(
                    "divergence fraction {:.3} exceeds threshold {:.3}",
                    stats.divergence_fraction(),
                    cfg.divergence_threshold
                );
                return Ok(EXIT_DIVERGED);
            }
        }
        ScenarioKind::BoundsSweep => {
            let report = run_bounds_sweep(&cfg)?;
            emit(
                out,
                &if json {
                    to_json(&report)?
                } else {
                    report.to_csv()
                },
            )?;
        }
        ScenarioKind::GaugeCheck => {
            let report = run_gauge_check(&cfg)?;
            emit(
                out,
                &if json {
                    to_json(&report)?
                } else {
                    report.to_csv()
                },
            )?;
        }
        ScenarioKind::GravityInit => {
            let report = run_gravity_init_experiment(&cfg)?;
            emit(
                out,
                &if json {
                    to_json(&report)?
                } else {
                    report.to_csv()
                },
            )?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
