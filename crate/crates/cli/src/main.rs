use std::process::ExitCode;

use casereader_cli::{run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(m) => {
            for (reason, n) in m.skipped.iter().filter(|(_, n)| **n > 0) {
                eprintln!("skipped {n} ({reason})");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
