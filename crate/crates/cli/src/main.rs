use std::process::ExitCode;

use clap::Parser;
use stylemap_cli::commands::{run, Cli};
use stylemap_cli::exit_code;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
