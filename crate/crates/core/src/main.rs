use std::process::ExitCode;

use clap::Parser;
use procplan::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // clap renders "error: ..."; keep the same prefix as runtime errors.
            eprint!("procplan: {}", e.render());
            return ExitCode::from(2);
        }
    };
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("procplan: error: {e}");
            ExitCode::FAILURE
        }
    }
}
