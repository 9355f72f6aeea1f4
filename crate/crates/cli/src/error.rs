use std::path::Path;

use hydrocorr::autodiff::checkpoint::CheckpointError;
use hydrocorr::baselines::BaselineError;
use hydrocorr::fpgnn::FpgnnError;
use hydrocorr::raster::RasterError;
use hydrocorr::synthgen::SynthError;
use hydrocorr::validation::ValidationError;
use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const IO: u8 = 1;
    pub const INVALID: u8 = 2;
    pub const UNLEARNABLE: u8 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Unlearnable(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => exit::IO,
            CliError::Invalid(_) => exit::INVALID,
            CliError::Unlearnable(_) => exit::UNLEARNABLE,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CliError::Invalid(msg.into())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl From<RasterError> for CliError {
    fn from(e: RasterError) -> Self {
        match e {
            RasterError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::Io(e.to_string()),
            CheckpointError::Corrupt(_) => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<FpgnnError> for CliError {
    fn from(e: FpgnnError) -> Self {
        match e {
            FpgnnError::Raster(r) => r.into(),
            FpgnnError::Checkpoint(c) => c.into(),
            FpgnnError::Unlearnable(_) => CliError::Unlearnable(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Raster(r) => r.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<ValidationError> for CliError {
    fn from(e: ValidationError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        CliError::Invalid(e.to_string())
    }
}
