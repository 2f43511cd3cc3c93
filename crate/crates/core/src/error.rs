use std::path::PathBuf;

use numgrad::NumError;
use thiserror::Error;

/// Failures reading a versioned binary file (model checkpoints, classifiers).
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a segzsl checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: need {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint dimensions disagree: {0}")]
    DimMismatch(String),
    #[error("malformed checkpoint header: {0}")]
    BadHeader(String),
}

/// Failures reading a dataset container directory.
#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("malformed manifest: {0}")]
    BadManifest(String),
    #[error("unknown container format {0:?}")]
    UnknownVersion(String),
    #[error("{file}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        file: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("inconsistent container: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),

    #[error("{what}: expected {expected}, got {found}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),

    #[error("attribute bank has no classes")]
    EmptyBank,

    #[error("class {0} is not in the attribute bank")]
    UnknownClass(usize),

    #[error("classes without training examples: {0:?}")]
    MissingClasses(Vec<usize>),

    #[error("non-finite {what} during {phase} epoch {epoch}, batch {batch}")]
    NonFinite {
        phase: &'static str,
        what: String,
        epoch: usize,
        batch: usize,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Container(#[from] ContainerError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Num(NumError::NonFiniteGradient { .. })
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
