//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or batch dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid input value (out-of-range label, zero-norm row, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Text parse failure, with the 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Binary file format failure (bad magic, truncated payload, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss.
    #[error("training fault at step {step}: {msg}")]
    Training { step: u64, msg: String },

    /// A function evaluation returned a non-finite value.
    #[error("evaluation error: {0}")]
    Eval(String),

    /// Metric requested for a class with no samples.
    #[error("class {0} has no samples; metric undefined")]
    UndefinedClass(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
