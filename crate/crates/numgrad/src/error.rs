use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: unsupported shape {shape:?} ({reason})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },

    #[error("shape {shape:?} needs {expected} elements, got {found}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("backward needs a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("variable {index} does not belong to this graph")]
    UnknownVar { index: usize },

    #[error("non-finite gradient in parameter group {group}")]
    NonFiniteGradient { group: usize },

    #[error("optimizer tracks {expected} parameter groups, got {found}")]
    GroupCount { expected: usize, found: usize },
}

pub type Result<T, E = NumError> = std::result::Result<T, E>;
