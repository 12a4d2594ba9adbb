use std::io;

use thiserror::Error;

use crate::compat::Mismatch;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("truncated length prefix: file has {0} bytes, need at least 8")]
    TruncatedLength(u64),
    #[error("truncated header: declared {declared} bytes, only {available} available")]
    TruncatedHeader { declared: u64, available: u64 },
    #[error("invalid header JSON: {0}")]
    InvalidJson(#[from] serde_json::Error),
    #[error("malformed header: {0}")]
    InvalidHeader(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),
    #[error("tensor name must be non-empty")]
    EmptyName,
    #[error("tensor name {0:?} is reserved")]
    ReservedName(String),
    #[error("tensor {name:?}: out-of-bounds range [{begin}, {end}) in payload of {payload_len} bytes")]
    OutOfBounds {
        name: String,
        begin: u64,
        end: u64,
        payload_len: u64,
    },
    #[error("tensor {second:?} overlaps data range of {first:?}")]
    Overlap { first: String, second: String },
    #[error("tensor {name:?}: shape implies {expected} bytes but data has {actual}")]
    ByteLength { name: String, expected: u64, actual: u64 },
    #[error("no tensor named {0:?}")]
    NoSuchTensor(String),
    #[error("writer expected tensor {expected:?} but got {got:?}")]
    WriteOrder { expected: String, got: String },
    #[error("writer finished with {0} tensors still unwritten")]
    Unfinished(usize),
}

/// A tensor whose computed output contains NaN or infinity.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct NonFiniteTensor {
    pub name: String,
    pub count: u64,
    pub first_index: u64,
}

#[derive(Debug, Error)]
pub enum ResidualError {
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("incompatible checkpoints: {}", describe_mismatches(.0))]
    Incompatible(Vec<Mismatch>),
    #[error("non-finite values produced in {} tensor(s): {}", .0.len(), describe_non_finite(.0))]
    NonFinite(Vec<NonFiniteTensor>),
    #[error("residual archive is missing provenance key {0:?}")]
    MissingProvenance(String),
    #[error("invalid residual archive: {0}")]
    InvalidResidual(String),
    #[error("invalid merge policy: {0}")]
    InvalidPolicy(String),
}

fn describe_mismatches(m: &[Mismatch]) -> String {
    m.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

fn describe_non_finite(t: &[NonFiniteTensor]) -> String {
    t.iter()
        .map(|x| format!("{} ({} elements, first at index {})", x.name, x.count, x.first_index))
        .collect::<Vec<_>>()
        .join("; ")
}
