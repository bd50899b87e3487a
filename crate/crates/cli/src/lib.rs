//! Experiment driver for the `safecritic` binary.
//!
//! Every subcommand reads a [`RunConfig`], writes a copy of it into its
//! output directory and returns the directory it wrote. Errors map onto the
//! process exit codes in [`CliError::exit_code`].

pub mod commands;
pub mod config;
pub mod experiment;

use std::path::{Path, PathBuf};

pub use config::{Algorithm, RunConfig, StartRegion};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("training aborted: {message} (diagnostics in {})", diagnostics.display())]
    TrainingAborted { message: String, diagnostics: PathBuf },

    #[error("theorem violation: {0}")]
    TheoremViolation(String),

    #[error(transparent)]
    Core(#[from] safecritic::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(safecritic::Error::Config(_)) => 2,
            CliError::TrainingAborted { .. } => 3,
            CliError::TheoremViolation(_) => 4,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| safecritic::Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| safecritic::Error::io(path, e).into())
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| safecritic::Error::json(path, e))?;
    write_file(path, &text)
}
