//! Error classes that map to distinct exit codes.

use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use eglr::config::ExperimentConfig;
use eglr::Error;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Failure {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("list length K={k} exceeds candidate pool size M={m}")]
    ListTooLong { k: usize, m: usize },
}

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_MISSING_FILE: u8 = 3;
pub const EXIT_INVALID_CONFIG: u8 = 4;
pub const EXIT_CHECKPOINT_VERSION: u8 = 5;
pub const EXIT_LIST_TOO_LONG: u8 = 6;

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::MissingFile(_) => EXIT_MISSING_FILE,
            Failure::InvalidConfig(_) => EXIT_INVALID_CONFIG,
            Failure::ListTooLong { .. } => EXIT_LIST_TOO_LONG,
        }
    }
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.code();
        }
        match cause.downcast_ref::<Error>() {
            Some(Error::Config(_)) => return EXIT_INVALID_CONFIG,
            Some(Error::CheckpointVersion { .. }) => return EXIT_CHECKPOINT_VERSION,
            Some(Error::Io(io)) if io.kind() == ErrorKind::NotFound => return EXIT_MISSING_FILE,
            _ => {}
        }
    }
    EXIT_OTHER
}

pub fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::MissingFile(path.to_path_buf()))
    }
}

/// K ≤ M first (its own diagnostic), then the full invariant check.
pub fn check_config(cfg: &ExperimentConfig) -> Result<(), Failure> {
    if cfg.task.list_len > cfg.task.pool_size {
        return Err(Failure::ListTooLong {
            k: cfg.task.list_len,
            m: cfg.task.pool_size,
        });
    }
    cfg.validate().map_err(|e| match e {
        Error::Config(msg) => Failure::InvalidConfig(msg),
        other => Failure::InvalidConfig(other.to_string()),
    })
}
