//! `deeplight` command line: dataset synthesis, preprocessing, pretraining,
//! fine-tuning, transfer comparison, evaluation and report regeneration.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 data or format
//! error, 3 numeric failure. Logs go to stderr; data goes to files only.

mod commands;

use clap::Parser;

use deeplight::Error;

#[derive(Debug, Parser)]
#[command(
    name = "deeplight",
    version,
    about = "Whole-brain fMRI state decoding pipeline",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: commands::Command,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap prints help/usage itself; usage problems exit 1.
            let _ = err.print();
            return match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}
