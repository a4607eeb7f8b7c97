use std::process::ExitCode;

use clap::Parser;
use mind_cli::{commands, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Err(w) = commands::write_failure(&cli.out, cli.command.name(), &e) {
                eprintln!("error: could not write failure manifest: {w:#}");
            }
            ExitCode::FAILURE
        }
    }
}
