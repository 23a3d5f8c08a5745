use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use lightsq_cli::args::{Cli, Command};
use lightsq_cli::{commands, init_threads, CliError};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => CliError::EXIT_FAILURE,
            };
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let mut out = std::io::stdout().lock();
    match &cli.command {
        Command::Fit(a) => commands::fit(a, &mut out),
        Command::Eval(a) => commands::eval(a, &mut out),
        Command::Refine(a) => commands::refine(a, &mut out),
        Command::Serve(a) => commands::serve(a, &mut out),
        Command::Voxelize(a) => commands::voxelize(a, &mut out),
        Command::Decompose(a) => commands::decompose(a, &mut out),
    }
}
