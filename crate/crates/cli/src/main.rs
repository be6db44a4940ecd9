//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 domain errors, 2 usage errors. Logs go to
//! standard error; data only to the declared output files, each written
//! atomically with a run manifest beside it.

mod cli;
mod commands;
mod runctx;

use clap::Parser;

use commands::UsageError;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with code 2 on its own parse failures.
    let args = cli::Cli::parse();
    if let Err(error) = commands::run(args) {
        eprintln!("error: {error:#}");
        let code = if error.downcast_ref::<UsageError>().is_some() {
            2
        } else {
            1
        };
        std::process::exit(code);
    }
}
