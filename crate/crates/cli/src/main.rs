use clap::Parser;
use triage_cli::commands::{self, Cli};
use triage_cli::{exit_code, EXIT_INVALID, EXIT_OK};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { EXIT_INVALID } else { EXIT_OK });
        }
    };
    if let Err(e) = commands::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}
