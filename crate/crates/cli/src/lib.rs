//! Experiment harness for the `ileqg` crate: configs and presets, the
//! `solve`, `approx-compare`, `robustness` and `validate` commands, and their
//! CSV/JSON outputs.

pub mod commands;
pub mod config;
pub mod output;
pub mod presets;
pub mod validate;

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_EARLY_STOP: i32 = 2;
pub const EXIT_CONFIG: i32 = 64;

/// Environment variable read for the worker count when `--threads` is absent.
pub const THREADS_ENV: &str = "ILEQG_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_FAILURE,
        }
    }
}
