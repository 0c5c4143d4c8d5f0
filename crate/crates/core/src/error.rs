use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Variants are grouped by class so the CLI can map each class onto a
/// distinct exit code (see [`Error::class`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("duplicate text symbol {0:?}")]
    DuplicateSymbol(String),

    #[error("unknown text symbol {0:?}")]
    UnknownSymbol(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("non-finite loss at step {step} (batch {batch}): {detail}")]
    NonFiniteLoss { step: u64, batch: u64, detail: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("missing checkpoint stage {0}")]
    MissingStage(String),

    #[error("provenance check failed for {path}: declared {declared}, actual {actual}")]
    HashMismatch {
        path: PathBuf,
        declared: String,
        actual: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error class, one per CLI exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Io,
    Provenance,
    Format,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_)
            | Error::DuplicateSymbol(_)
            | Error::UnknownSymbol(_)
            | Error::ShapeMismatch(_)
            | Error::SequenceTooLong { .. }
            | Error::MissingStage(_)
            | Error::Config(_) => ErrorClass::Usage,
            Error::Io { .. } => ErrorClass::Io,
            Error::HashMismatch { .. } => ErrorClass::Provenance,
            Error::VersionMismatch { .. }
            | Error::Truncated(_)
            | Error::Checksum { .. }
            | Error::Format(_)
            | Error::Json(_) => ErrorClass::Format,
            Error::NonFiniteLoss { .. } => ErrorClass::Numeric,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $err:expr) => {
        if !$cond {
            return Err($err);
        }
    };
}
pub(crate) use ensure;
