use std::io;
use std::path::Path;

use nar_core::controller::ControllerError;
use nar_core::nar::NarError;
use nar_core::oracles::OracleError;
use nar_core::pgtrainer::TrainError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_GUARD: i32 = 3;
pub const EXIT_ORACLE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("guard violation: {0}")]
    Guard(String),
    #[error("oracle failure: {0}")]
    Oracle(String),
    /// A verification run completed and its check failed.
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Guard(_) => EXIT_GUARD,
            CliError::Oracle(_) | CliError::CheckFailed(_) => EXIT_ORACLE,
            CliError::Io { .. } | CliError::Internal(_) => EXIT_INTERNAL,
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::TooLarge { .. } => CliError::Guard(e.to_string()),
            OracleError::Evaluation { .. } => CliError::Oracle(e.to_string()),
            OracleError::Config(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<ControllerError> for CliError {
    fn from(e: ControllerError) -> Self {
        match e {
            ControllerError::Io(_) | ControllerError::Checkpoint(_) => CliError::Internal(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Oracle(inner) => inner.into(),
            TrainError::Controller(inner) => inner.into(),
            TrainError::EmptyBatch => CliError::Config(e.to_string()),
            TrainError::NonFiniteGradient(_) | TrainError::GradientLength { .. } => {
                CliError::Internal(e.to_string())
            }
        }
    }
}

impl From<NarError> for CliError {
    fn from(e: NarError) -> Self {
        match e {
            NarError::Oracle(inner) => inner.into(),
            NarError::Train(inner) => inner.into(),
            NarError::Controller(inner) => inner.into(),
            NarError::Config(_) | NarError::Parse(_) | NarError::Space(_) => {
                CliError::Config(e.to_string())
            }
        }
    }
}
