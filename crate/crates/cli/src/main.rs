//! `rotout`: one seeded experiment per invocation, written as CSV plus a
//! JSON manifest under `<out-dir>/<subcommand>/`.
//!
//! Exit status: 0 on success, 1 on i/o trouble, 2 on a bad flag or config
//! value, 3 when a computation fails or a checked invariant does not hold.

mod config;
mod error;
mod experiments;
mod output;
mod plot;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = config::Cli::parse();
    match experiments::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rotout: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
