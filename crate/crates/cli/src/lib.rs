//! Library behind the `seta` binary: config loading, the experiment commands
//! and the files they write.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod report;

use std::path::Path;

pub use commands::{baseline, run, verify_fixtures, Method, RunSummary};
pub use config::ExperimentConfig;
pub use report::report;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_MISSING: u8 = 4;

/// An error with the process exit code it maps to.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }

    pub fn missing(path: &Path) -> Self {
        Self::new(EXIT_MISSING, format!("missing file {}", path.display()))
    }
}

impl From<seta_core::Error> for CliError {
    fn from(e: seta_core::Error) -> Self {
        use seta_core::Error as E;
        let code = match &e {
            E::InvalidConfig(_) | E::Budget { .. } | E::Parse { .. } => EXIT_CONFIG,
            E::Numeric(_) => EXIT_NUMERIC,
            E::Missing(_) => EXIT_MISSING,
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        seta_core::Error::Io(e).into()
    }
}
