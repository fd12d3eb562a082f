//! `truncdeath`: simulate, validate, impute and analyse longitudinal cohorts
//! with deaths.
//!
//! Exit status is 0 on success, 1 for usage, data or validation errors and 2
//! when a numerical routine fails (singular design, separation,
//! non-convergence).

mod args;
mod commands;
mod compare;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Failure of a subcommand, already classified by exit status.
#[derive(Debug)]
pub enum Failure {
    Data(String),
    Numerical(String),
}

impl From<truncdeath_core::Error> for Failure {
    fn from(e: truncdeath_core::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

pub type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Validate(a) => commands::validate(&a),
        Command::Impute(a) => commands::impute(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Pah(a) => commands::pah(&a),
        Command::Report(a) => compare::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}
