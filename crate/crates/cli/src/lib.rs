//! Command-line front end for the busyness-graph forecaster.

pub mod args;
pub mod commands;
pub mod run_config;

use anyhow::Result;
use args::{Cli, Command};

pub fn run(cli: &Cli) -> Result<()> {
    commands::bail_if_zero_threads(cli.threads)?;
    // Ignore the error when a pool already exists (repeated calls in tests).
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(1))
        .build_global();
    match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train_cmd(a, cli.threads),
        Command::Eval(a) => commands::eval_cmd(a, cli.threads),
        Command::Ablate(a) => commands::ablate_cmd(a, cli.threads),
        Command::InspectGraph(a) => commands::inspect_cmd(a, cli.threads),
    }
}
