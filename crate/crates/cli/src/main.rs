//! `sepdl`: train separable dictionaries, denoise images, benchmark the
//! parallel trainer and evaluate results.

mod commands;
mod manifest;
mod source;

use std::process::ExitCode;

use clap::{CommandFactory, Parser};
use thiserror::Error;

use commands::Command;

#[derive(Debug, Parser)]
#[command(name = "sepdl", version, about = "Separable dictionary learning and image denoising")]
struct Cli {
    /// Log progress to standard error (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or inconsistent flags; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Anything that fails after the flags were accepted; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    sepdl_core::DataError,
    sepdl_core::TrainError,
    sepdl_core::DenoiseError,
    sepdl_core::CodingError,
    std::io::Error,
    serde_json::Error
);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
