//! `nestnet` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical
//! failure during training, 4 failed verification.

mod args;
mod commands;
mod gradcheck;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// A verification command ran to completion and found a violation.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "verification failed: {}", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerificationFailed>().is_some() {
        return 4;
    }
    let numeric = err
        .chain()
        .any(|e| e.downcast_ref::<nestnet::Error>().is_some_and(nestnet::Error::is_numeric));
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Curves(a) => commands::curves(a),
        Command::Gradcheck(a) => gradcheck::run(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
