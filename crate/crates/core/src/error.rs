use thiserror::Error;

/// Errors produced by the nmslope library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid N:M pattern {n}:{m} (need 1 <= n <= m <= 64)")]
    InvalidPattern { n: usize, m: usize },

    #[error("cannot parse pattern {0:?}, expected \"N:M\"")]
    PatternSyntax(String),

    #[error("dimension {dim} is not divisible by group size {m}")]
    NotDivisible { dim: usize, m: usize },

    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("pattern mismatch in {op}: {detail}")]
    PatternMismatch { op: &'static str, detail: String },

    #[error("mask violates its N:M constraint: {0}")]
    MaskViolation(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("malformed compressed stream: {0}")]
    Format(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },

    #[error("{0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(
    op: &'static str,
    expected: impl std::fmt::Display,
    found: impl std::fmt::Display,
) -> Error {
    Error::Shape {
        op,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
