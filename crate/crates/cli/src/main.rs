//! `repsim`: file-in, file-out front end for the analysis toolkit and the
//! toy trainer.
//!
//! Exit status is 0 on success, 2 for argument or configuration mistakes and
//! 3 for unreadable or inconsistent data.

mod analysis;
mod args;
mod error;
mod manifest;
mod probe;
mod toy;

use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::error::{exit_code, CliError};

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("REPSIM_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::Usage(format!("REPSIM_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Data(format!("cannot size the worker pool: {e}")))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Heatmap(a) => analysis::heatmap(a),
        Command::Dominant(a) => analysis::dominant(a),
        Command::Ablate(a) => analysis::ablate(a),
        Command::Spectrum(a) => analysis::spectrum(a),
        Command::Kernel(a) => analysis::kernel(a),
        Command::TrainToy(a) => toy::train_toy(a),
        Command::Evolution(a) => toy::evolution(a),
        Command::Probe(a) => probe::probe(a),
        Command::ManifestSchema => {
            print!("{}", manifest::SCHEMA);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
        // the hook has already printed the message
        Err(_) => ExitCode::from(3),
    }
}
