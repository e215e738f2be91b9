// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use barbie_server::{run_blocking, InstanceConfig};
use clap::Parser;

/// Runs one key-manager instance.
#[derive(Parser)]
#[command(name = "barbie-server", version)]
struct Args {
    /// Instance configuration (JSON). BARBIE_LISTEN and BARBIE_STORE_ROOT override it.
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = InstanceConfig::load(&args.config).map_err(|e| e.to_string()).and_then(|c| run_blocking(c).map_err(|e| e.to_string()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("barbie-server: {e}");
            ExitCode::from(1)
        }
    }
}
