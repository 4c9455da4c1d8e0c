// SPDX-License-Identifier: MIT OR Apache-2.0

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use mipc_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mipc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
