//! `refgame`: generate worlds, train models and evaluate them from the shell.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use commands::{Cli, CliError};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match &e {
                CliError::Config(_) => ("config", 3),
                CliError::Runtime(_) => ("runtime", 1),
            };
            eprintln!("error[{kind}]: {e}");
            ExitCode::from(code)
        }
    }
}
