use std::process::ExitCode;

use clap::Parser;
use formation_learning::cli::{execute, Cli};

fn main() -> ExitCode {
    ExitCode::from(execute(Cli::parse()))
}
