//! Command-line front end: flag parsing, config resolution and the
//! subcommand pipelines.

pub mod args;
pub mod commands;
pub mod config;

use anyhow::{Context, Result};

use args::{Cli, Command};
use config::resolve;

/// Sizes the global rayon pool from `MOARM_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MOARM_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().with_context(|| format!("MOARM_THREADS must be a positive integer, got '{v}'"))?;
    if n == 0 {
        anyhow::bail!("MOARM_THREADS must be positive");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")
}

pub fn run(cli: Cli) -> Result<()> {
    let file = cli.config.as_deref();
    match &cli.command {
        Command::Prep(a) => {
            let cfg: config::PrepConfig = resolve(file, a)?;
            cfg.validate()?;
            commands::prep(&cfg)
        }
        Command::Mask(a) => {
            let cfg: config::MaskConfig = resolve(file, a)?;
            cfg.validate()?;
            commands::mask(&cfg)
        }
        Command::Train(a) => {
            let cfg: config::TrainConfig = resolve(file, a)?;
            cfg.validate()?;
            commands::train(&cfg)
        }
        Command::Impute(a) => {
            let cfg: config::ImputeConfig = resolve(file, a)?;
            cfg.validate()?;
            commands::impute(&cfg)
        }
        Command::Acquire(a) => {
            let cfg: config::AcquireConfig = resolve(file, a)?;
            cfg.validate()?;
            commands::acquire(&cfg)
        }
        Command::Bench(a) => {
            let cfg: config::BenchConfig = resolve(file, a)?;
            cfg.validate()?;
            commands::bench(&cfg)
        }
        Command::Serve(a) => {
            let cfg: config::ServeConfig = resolve(file, a)?;
            cfg.validate()?;
            commands::serve(&cfg)
        }
    }
}
