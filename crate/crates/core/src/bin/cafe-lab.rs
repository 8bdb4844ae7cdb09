//! `cafe-lab` command-line front end.
//!
//! Exit codes: 0 success, 2 usage error (from clap), otherwise the error
//! code of the failure (see `LabError::code`), printed to stderr as a JSON
//! record `{"error": {"code", "kind", "message"}}`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cafe_lab::config::{ExperimentConfig, SweepAxis};
use cafe_lab::experiment::{cmd_attack, cmd_sweep, cmd_train, cmd_verify_theory};
use cafe_lab::LabError;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cafe-lab", version, about = "VFL gradient-leakage laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Shipped preset name, used when no --config is given.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: the config's out_dir, else out/<name>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the split model and log per-round losses.
    Train,
    /// Run the configured attack and report recovery quality.
    Attack,
    /// Check Hessian spectra and the recovery bound on an N, K grid.
    VerifyTheory,
    /// Run the attack over a grid of one parameter.
    Sweep {
        /// One of K, alpha, beta, gamma, xi, M, lr.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated grid, e.g. `0.001,0`.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// List shipped presets.
    Presets,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, LabError> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => return Err(LabError::Config("pass --config <path> or --preset <name>".into())),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), LabError> {
    if let Command::Presets = cli.command {
        for (name, _) in cafe_lab::config::PRESETS {
            println!("{name}");
        }
        return Ok(());
    }
    let cfg = load(cli)?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| Path::new("out").join(&cfg.name));
    let manifest = match &cli.command {
        Command::Train => cmd_train(&cfg, &out)?,
        Command::Attack => cmd_attack(&cfg, &out)?,
        Command::VerifyTheory => cmd_verify_theory(&cfg, &out)?,
        Command::Sweep { axis, values } => {
            let axis = axis.as_deref().map(SweepAxis::parse).transpose()?;
            cmd_sweep(&cfg, axis, values.clone(), &out)?
        }
        Command::Presets => unreachable!(),
    };
    println!("{}", serde_json::to_string(&manifest).expect("manifest serializes"));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "error": { "code": e.code(), "kind": e.kind(), "message": e.to_string() }
            });
            eprintln!("{record}");
            ExitCode::from(u8::try_from(e.code()).unwrap_or(1))
        }
    }
}
