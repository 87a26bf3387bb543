use std::process::ExitCode;

use clap::Parser;
use scriptpool_cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    let result = run(cli);
    if let Err(e) = &result {
        eprintln!("error: {e:#}");
    }
    exit_code(&result)
}
