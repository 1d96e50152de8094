//! Command-line front end for the flow model.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;

use args::{Cli, Command};
use commands::Context;
use config::RunConfig;
use error::{CliError, CliResult};
use manifest::{file_sha256, sha256_hex, Manifest};

pub const DEFAULT_OUT: &str = "moflow_out";

/// Parse `args` (including the program name), execute, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("moflow: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.flags.config.as_deref())?;
    apply_flags(&mut cfg, &cli)?;
    let seed = cfg.seed.ok_or_else(|| CliError::Usage("a seed is required (--seed or `seed` in the config)".into()))?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    std::fs::create_dir_all(&out)?;
    let config_sha256 = sha256_hex(cfg.canonical_json().as_bytes());
    let checkpoint_sha256 = match &cfg.checkpoint {
        Some(p) if p.exists() && !matches!(cli.command, Command::Train) => Some(file_sha256(p)?),
        _ => None,
    };
    let dataset_sha256 = cfg.dataset.as_deref().filter(|p| p.exists()).map(file_sha256).transpose()?;
    let name = cli.command.name();
    let ctx = Context { cfg, seed, out: out.clone(), flags: cli.flags };
    let mut failed = false;
    let files = match &cli.command {
        Command::Preprocess { synthesize } => commands::preprocess(&ctx, *synthesize)?,
        Command::Train => commands::train_cmd(&ctx)?,
        Command::Generate => commands::generate(&ctx)?,
        Command::Reconstruct => commands::reconstruct(&ctx)?,
        Command::Encode => commands::encode(&ctx)?,
        Command::Interpolate => commands::interpolate_cmd(&ctx)?,
        Command::Grid => commands::grid(&ctx)?,
        Command::Optimize => commands::optimize(&ctx)?,
        Command::ConstrainedOptimize => commands::constrained(&ctx)?,
        Command::Metrics { input } => commands::metrics_cmd(&ctx, input)?,
        Command::Selfcheck => {
            let (files, ok) = commands::selfcheck_cmd(&ctx)?;
            failed = !ok;
            files
        }
    };
    let manifest = Manifest {
        command: name.to_string(),
        seed,
        config_sha256,
        checkpoint_sha256,
        dataset_sha256,
        outputs: BTreeMap::new(),
    };
    manifest.write(&out, &files)?;
    if failed {
        return Err(CliError::Numerical("selfcheck found checks outside tolerance".into()));
    }
    Ok(())
}

fn apply_flags(cfg: &mut RunConfig, cli: &Cli) -> CliResult<()> {
    let f = &cli.flags;
    if let Some(s) = f.seed {
        cfg.seed = Some(s);
    }
    if let Some(p) = &f.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    if let Some(p) = &f.out {
        cfg.out = Some(p.clone());
    }
    if let Some(p) = &f.dataset {
        cfg.dataset = Some(p.clone());
    }
    if let Some(t) = f.temperature {
        if t.is_nan() || t < 0.0 {
            return Err(CliError::Usage(format!("--temperature must be non-negative, got {t}")));
        }
        cfg.generate.temperature = t;
    }
    if f.no_correction {
        cfg.generate.correction = false;
    }
    if let Some(c) = f.count {
        cfg.generate.count = c;
        cfg.explore.interpolation_count = c;
    }
    if let Some(d) = f.delta.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(CliError::Usage(format!("--delta must lie in [0, 1], got {d}")));
    }
    Ok(())
}
