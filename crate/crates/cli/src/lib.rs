//! File formats and commands for running mode-approximation adapter
//! experiments from the command line.
//!
//! Every command writes into an output directory: `metrics.csv` and
//! `model.ckpt` from training, `gradcheck.csv`, `audit.json`,
//! `convergence.csv` and `eval.json` from the analysis commands. All of them
//! are byte-identical across runs with the same config and seed.

use std::path::{Path, PathBuf};

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod report;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("check failed: {0}")]
    Assertion(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// 1 for unreadable or damaged files, 2 for bad settings, 3 for NaN or
    /// infinity during a run, 4 when a numerical check does not hold.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io { .. } | Self::Corrupt { .. } => 1,
            Self::Validation(_) => 2,
            Self::NonFinite(_) => 3,
            Self::Assertion(_) => 4,
        }
    }
}

impl From<modeprompt_core::Error> for CliError {
    fn from(e: modeprompt_core::Error) -> Self {
        match e {
            modeprompt_core::Error::NonFinite(m) => Self::NonFinite(m),
            other => Self::Validation(other.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}
