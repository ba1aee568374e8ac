use clap::Parser;
use mgcp_cli::args::Cli;
use mgcp_cli::{commands, exit_code};

fn main() {
    let cli = Cli::parse();
    if let Err(err) = commands::run(&cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}
