//! `cra`: inpainting, benchmarking, training and diagnostics from the shell.

mod ablate;
mod args;
mod bench;
mod checkgrad;
mod inpaint;
mod maskgen;
mod model;
mod train;

use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use clap::Parser;
use cra_core::CraError;

use args::{AblateCommand, Cli, Command};

/// Exit status for each failure class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Exit {
    Usage = 1,
    Io = 2,
    Numeric = 3,
    Dimension = 4,
}

fn exit_for(e: &CraError) -> Exit {
    match e {
        CraError::Io { .. }
        | CraError::Image { .. }
        | CraError::Container(_)
        | CraError::WeightMismatch(_) => Exit::Io,
        CraError::NonFinite(_) | CraError::Invariant(_) => Exit::Numeric,
        CraError::Dimension(_) | CraError::Shape(_) => Exit::Dimension,
        _ => Exit::Usage,
    }
}

/// Determinism mode pins everything to one thread and drops wall-clock
/// values from file outputs.
fn deterministic() -> bool {
    std::env::var("CRA_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn run(cli: Cli) -> Result<(), CraError> {
    let threads = if deterministic() {
        Some(1)
    } else {
        cli.threads
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CraError::InvalidArgument(
                "--threads must be at least 1".into(),
            ));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CraError::InvalidArgument(format!("thread pool: {e}")))?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Inpaint(a) => inpaint::run(&a, seed),
        Command::Bench(a) => bench::run(&a, seed, deterministic()),
        Command::Train(a) => train::run(&a, seed, deterministic()),
        Command::Maskgen(a) => maskgen::run(&a, seed),
        Command::Checkgrad => checkgrad::run(seed),
        Command::Ablate(AblateCommand::Resample(a)) => ablate::resample(&a, seed),
        Command::Ablate(AblateCommand::Gates(a)) => ablate::gates(&a, seed),
    }
}

/// Writes `text` to `path`, or to stdout when no path is given.
pub(crate) fn emit(text: &str, path: Option<&Path>) -> Result<(), CraError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CraError::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|e| CraError::Io {
                path: "<stdout>".into(),
                source: e,
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Exit::Usage as u8 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e) as u8)
        }
    }
}
