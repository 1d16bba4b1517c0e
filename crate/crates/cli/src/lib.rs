//! Command-line front end for formation optimization and estimation.
//!
//! Every command reads a scenario file (or a built-in preset), writes its
//! results into `--out` as CSV and JSON, and records a `manifest.json` listing
//! the parameters and files. CSV floats carry 17 significant digits.

pub mod args;
pub mod commands;
pub mod error;
pub mod jacobian;
pub mod output;

pub use args::{Cli, Command};
pub use error::{exit, CliError};
pub use output::RunManifest;

/// Runs one command. `presets` writes no manifest and returns `None`.
pub fn run(cli: &Cli) -> Result<Option<RunManifest>, CliError> {
    match &cli.command {
        Command::Optimize(a) => commands::optimize(a).map(Some),
        Command::Evaluate(a) => commands::evaluate(a).map(Some),
        Command::CheckJacobian(a) => commands::check(a).map(Some),
        Command::Estimate(a) => commands::estimate(a).map(Some),
        Command::Montecarlo(a) => commands::montecarlo(a).map(Some),
        Command::Crlb(a) => commands::crlb_cmd(a).map(Some),
        Command::Presets(a) => commands::presets(a).map(|()| None),
    }
}
