use std::process::ExitCode;

use clap::Parser;

use hsdnet_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("hsdnet: {e:#}");
            ExitCode::FAILURE
        }
    }
}
