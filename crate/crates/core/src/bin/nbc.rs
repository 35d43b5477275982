use std::process::ExitCode;

use clap::Parser;

use nbc::cli::{error_line, init_logging, run, Cli};
use nbc::NbcError;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging() {
        eprintln!("{}", error_line(&NbcError::Config(e)));
        return ExitCode::from(2);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
