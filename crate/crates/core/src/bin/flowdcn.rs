use std::process::ExitCode;

use clap::Parser;
use flowdcn::cli::{init_threads, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| run(cli, &mut std::io::stdout()));
    match result {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
