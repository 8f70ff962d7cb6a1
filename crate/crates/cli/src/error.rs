use std::path::Path;
use std::process::ExitCode;

use abis_core::eval::EvalError;
use abis_core::fusion::FusionError;
use abis_core::index::IndexError;
use abis_core::synth::SynthError;
use abis_service::ServiceError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, bad config, missing input files.
    #[error("{0}")]
    Usage(String),
    /// Input files that exist but cannot be decoded.
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        })
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Missing inputs are usage errors, not I/O failures.
pub fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input file {} does not exist", path.display())))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::Format(_) | IndexError::Template(_) | IndexError::IdConflict(_) | IndexError::MissingId => {
                CliError::Data(e.to_string())
            }
            IndexError::InvalidArgument(_) | IndexError::Fusion(_) => CliError::Usage(e.to_string()),
            IndexError::Capacity { .. } | IndexError::UnknownId(_) | IndexError::Io(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Index(e) => e.into(),
            EvalError::InvalidArgument(_) | EvalError::Resolution { .. } => CliError::Usage(e.to_string()),
            EvalError::Io(_) | EvalError::Csv(_) | EvalError::Json(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(_) | SynthError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            SynthError::Registry { .. } => CliError::Data(e.to_string()),
            SynthError::Eval(e) => e.into(),
            SynthError::Index(e) => e.into(),
            SynthError::Calibration { .. } | SynthError::Io(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Config(_) | ServiceError::BadRequest(_) => CliError::Usage(e.to_string()),
            ServiceError::Storage(_) => CliError::Data(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}
