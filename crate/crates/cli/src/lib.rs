//! Command-line pipeline around the `scann` library: train, sample,
//! holdout and report, each writing CSV/JSON outputs and a manifest.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod votes;

use std::path::PathBuf;

use config::{Cli, Command, FileConfig};
pub use error::{CliError, CliResult};

/// Resolves the configuration and runs one command. Returns the path of the
/// manifest written.
pub fn run(cli: &Cli) -> CliResult<PathBuf> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::Train(a) => commands::run_train(&config::resolve_train(a, &file)?),
        Command::Sample(a) => commands::run_sample(&config::resolve_sample(a, &file)?),
        Command::Holdout(a) => commands::run_holdout(&config::resolve_holdout(a, &file)?),
        Command::Report(a) => commands::run_report(&config::resolve_report(a, &file)?),
    }
}
