use std::process::ExitCode;

use clap::Parser;
use neuroscale_cli::{main_with, Cli};

fn main() -> ExitCode {
    match main_with(&Cli::parse()) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
