use std::fmt;

use resforge_core::flops::FlopsError;
use resforge_core::{ArchiveError, PackError, ResidualError};

/// A failed command and its stable exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Incompatible(String),
    Io(String),
    NonFinite(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Incompatible(_) => 2,
            Failure::Io(_) => 3,
            Failure::NonFinite(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Incompatible(m) | Failure::Io(m) | Failure::NonFinite(m) => f.write_str(m),
        }
    }
}

impl From<ResidualError> for Failure {
    fn from(e: ResidualError) -> Self {
        let msg = e.to_string();
        match e {
            ResidualError::Incompatible(_) => Failure::Incompatible(msg),
            ResidualError::NonFinite(_) => Failure::NonFinite(msg),
            ResidualError::InvalidPolicy(_) => Failure::Usage(msg),
            ResidualError::Archive(_) | ResidualError::MissingProvenance(_) | ResidualError::InvalidResidual(_) => {
                Failure::Io(msg)
            }
        }
    }
}

impl From<ArchiveError> for Failure {
    fn from(e: ArchiveError) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<PackError> for Failure {
    fn from(e: PackError) -> Self {
        match e {
            PackError::InvalidSeqLen => Failure::Usage(e.to_string()),
            _ => Failure::Io(e.to_string()),
        }
    }
}

impl From<FlopsError> for Failure {
    fn from(e: FlopsError) -> Self {
        Failure::Usage(e.to_string())
    }
}
