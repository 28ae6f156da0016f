//! The `udocker` command: argument grammar, verb implementations and the
//! mapping from failures to exit codes.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success (for `run`, the container's own exit code) |
//! | 1 | usage error |
//! | 2 | image, container, name or command not found |
//! | 3 | integrity failure (digest or checksum mismatch) |
//! | 4 | engine fault |
//! | 5 | execution mode unavailable on this host |
//! | 6 | any other failure |

pub mod args;
mod commands;
pub mod install;

use std::ffi::OsString;

use udocker_core::engine::EngineError;
use udocker_core::metadata::MetaError;
use udocker_core::registry::RegistryError;
use udocker_core::repo::RepoError;

pub use args::{parse, Globals, Operation};
pub use commands::dispatch;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NOT_FOUND: i32 = 2;
pub const EXIT_INTEGRITY: i32 = 3;
pub const EXIT_ENGINE: i32 = 4;
pub const EXIT_UNAVAILABLE: i32 = 5;
pub const EXIT_OTHER: i32 = 6;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Clap(#[from] clap::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    NotFound(String),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("{0}")]
    Unavailable(String),
}

fn repo_code(e: &RepoError) -> Option<i32> {
    Some(match e {
        RepoError::NotFound(_) | RepoError::IncompleteImage { .. } => EXIT_NOT_FOUND,
        RepoError::Integrity { .. } | RepoError::InvalidDigest(_) => EXIT_INTEGRITY,
        RepoError::InvalidRef(_) | RepoError::InvalidName(_) => EXIT_USAGE,
        _ => return None,
    })
}

/// The exit code for a failure: the first cause in the chain that belongs
/// to a known class decides.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        let code = if let Some(e) = cause.downcast_ref::<CliError>() {
            Some(match e {
                CliError::Clap(_) | CliError::Usage(_) => EXIT_USAGE,
                CliError::NotFound(_) => EXIT_NOT_FOUND,
                CliError::Integrity(_) => EXIT_INTEGRITY,
                CliError::Unavailable(_) => EXIT_UNAVAILABLE,
            })
        } else if let Some(e) = cause.downcast_ref::<RepoError>() {
            repo_code(e)
        } else if let Some(e) = cause.downcast_ref::<RegistryError>() {
            match e {
                RegistryError::NotFound(_) => Some(EXIT_NOT_FOUND),
                RegistryError::Http { status: 404, .. } => Some(EXIT_NOT_FOUND),
                RegistryError::Repo(r) => repo_code(r),
                _ => None,
            }
        } else if let Some(e) = cause.downcast_ref::<EngineError>() {
            Some(match e {
                EngineError::NotFound(_) => EXIT_NOT_FOUND,
                EngineError::Unavailable(_) => EXIT_UNAVAILABLE,
                _ => EXIT_ENGINE,
            })
        } else if let Some(e) = cause.downcast_ref::<MetaError>() {
            Some(match e {
                MetaError::UnknownUser(_) => EXIT_NOT_FOUND,
                MetaError::NoCommand | MetaError::RelativeBind(_) | MetaError::InvalidEnv(_) => EXIT_USAGE,
                _ => EXIT_OTHER,
            })
        } else {
            None
        };
        if let Some(c) = code {
            return c;
        }
    }
    EXIT_OTHER
}

fn init_logging(g: &Globals) {
    let level = match (g.quiet, g.debug) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, 2) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("UDOCKER_LOG")
        .format_timestamp(None)
        .try_init();
}

/// Runs one command line and returns the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let (globals, op) = match parse(argv) {
        Ok(p) => p,
        Err(CliError::Clap(e)) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
        Err(e) => {
            eprintln!("udocker: {e}");
            return EXIT_USAGE;
        }
    };
    init_logging(&globals);
    match dispatch(&globals, op) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("udocker: error: {e:#}");
            exit_code(&e)
        }
    }
}
