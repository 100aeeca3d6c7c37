use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LavoError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("tensor data length {len} does not match shape {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("softmax row {row} has no visible entries")]
    DegenerateRow { row: usize },
    #[error("cannot build {rows} orthonormal rows in dimension {dim}")]
    InfeasibleBasis { rows: usize, dim: usize },
    #[error("context is empty")]
    EmptyContext,
    #[error("input sequence is empty")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, LavoError>;
