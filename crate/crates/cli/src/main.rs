//! `nad`: neuron-attention decomposition pipelines over tensor bundles.
//!
//! Exit codes: 0 on success, 1 when a pipeline fails, 2 on usage errors.

mod args;
mod commands;
mod config;
mod inputs;
mod output;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::Parser;

use args::Cli;

const USAGE: u8 = 2;
const FAILURE: u8 = 1;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();

    let argv: Vec<OsString> = std::env::args_os().collect();
    let argv = match config::merge(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(USAGE);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { 0 });
        }
    };

    for (flag, path) in args::input_paths(&cli.command) {
        if !path.exists() {
            eprintln!("error: {flag} path {} does not exist", path.display());
            return ExitCode::from(USAGE);
        }
    }

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        pool = pool.num_threads(t as usize);
    }
    if let Err(e) = pool.build_global() {
        log::warn!("thread pool: {e}");
    }

    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{} failed: {e:#}", cli.command.name());
            ExitCode::from(FAILURE)
        }
    }
}
