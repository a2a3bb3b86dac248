//! `ssot` command-line interface: OT solves and benchmarks, synthetic PDA
//! tasks, and adaptation runs. Exit codes: 0 success, 2 usage or input
//! error, 3 numerical failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

mod config_file;
mod ot;
mod output;
mod pda;

pub use config_file::{apply_overrides, parse_key_values};
pub use output::{resolve_out_dir, RunManifest, OUT_DIR_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ssot", version, about = "Semi-dual optimal transport solvers and partial domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimal transport between two point clouds.
    #[command(subcommand)]
    Ot(ot::OtCommand),
    /// Partial domain adaptation experiments.
    #[command(subcommand)]
    Pda(pda::PdaCommand),
}

/// Command failure, mapped onto an exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(ssot_core::Error),
    /// Numerical abort with extra context (e.g. where the snapshot went).
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<ssot_core::Error> for CliError {
    fn from(e: ssot_core::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Ot(c) => ot::run(c, &argv),
        Command::Pda(c) => pda::run(c, &argv),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub(crate) fn write_json(path: &std::path::Path, value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|e| ssot_core::Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    Ok(())
}

pub(crate) fn create_dir(dir: &std::path::Path) -> CliResult<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| ssot_core::Error::Io {
        path: dir.to_owned(),
        source: e,
    })?;
    Ok(dir.to_owned())
}
