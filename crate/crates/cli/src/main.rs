mod args;
mod artifacts;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use lmad_core::LmadError;

/// Exit status for invalid flags, config values or missing required inputs.
const EXIT_USAGE: u8 = 1;
/// Exit status for failures while running a command.
const EXIT_RUNTIME: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match args::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lmad {}: {e}", cli.command.name());
            match e {
                LmadError::Config(_) => ExitCode::from(EXIT_USAGE),
                _ => ExitCode::from(EXIT_RUNTIME),
            }
        }
    }
}
