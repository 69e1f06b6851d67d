use std::process::ExitCode;

use bysgnn_cli::args::Cli;
use bysgnn_cli::commands::exit_code;
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match bysgnn_cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
