use clap::Parser;

use tracs::cli_config::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(error) = run(cli) {
        eprintln!("error: {error}");
        std::process::exit(exit_code(&error));
    }
}
