use std::process::ExitCode;

use clap::Parser;
use stunet_cli::commands::{run, Cli};

/// Caps the worker pool when `STUNET_THREADS` is set.
fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("STUNET_THREADS") else { return Ok(()) };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| format!("STUNET_THREADS='{value}' is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
