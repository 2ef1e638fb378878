//! `polypseg` — generate data, train, evaluate, predict, ablate and profile
//! the segmentation network from one binary.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use commands::{Cli, Command};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Predict(args) => commands::predict(args),
        Command::Ablate(args) => commands::ablate(args),
        Command::Profile(args) => commands::profile(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
