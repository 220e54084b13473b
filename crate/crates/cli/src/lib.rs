//! Command-line layer for gcp-smd: flag and config-file resolution, run
//! manifests and the four subcommands.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::ffi::OsString;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::error::{CliError, CliResult};

/// Parses `argv` (config files expanded) and runs the command, printing its
/// human-readable summary to stdout.
pub fn run_from(argv: Vec<OsString>) -> CliResult<()> {
    let argv = config::expand_args(argv)?;
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(CliError::Usage(e.to_string()));
        }
    };
    dispatch(&cli)
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synthesize(a) => {
            let out = commands::synthesize(a)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&out.manifest).expect("manifest serializes")
            );
        }
        Command::Decompose(a) => {
            let out = commands::decompose(a)?;
            let rec = out.output.trace.final_record();
            println!(
                "stop: {:?} after {} iterations; final nre {}{}",
                out.output.stop,
                out.output.iterations,
                rec.map_or(f64::NAN, |r| r.nre),
                rec.and_then(|r| r.mse_mean)
                    .map_or_else(String::new, |m| format!("; mse {m}"))
            );
            println!("trace: {}", out.trace_path.display());
            println!("manifest: {}", out.manifest_path.display());
        }
        Command::Compare(a) => {
            let out = commands::compare(a)?;
            println!("threshold nre {}", out.threshold);
            print!("{}", commands::summary_csv(&out.rows));
            println!("summary: {}", out.summary_path.display());
        }
        Command::Verify(a) => {
            let report = commands::verify(a)?;
            println!("{report}");
            if !report.passed() {
                return Err(CliError::Failed(format!(
                    "{} verification checks failed",
                    report.failures().count()
                )));
            }
        }
    }
    Ok(())
}
