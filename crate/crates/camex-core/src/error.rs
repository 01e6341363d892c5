//! Error type shared across the crate.
//!
//! Every fallible operation returns [`CamexError`]. Shape problems always name
//! both offending shapes so a failure deep in a pipeline is diagnosable from
//! the message alone.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CamexError>;

/// All error conditions raised by this crate.
#[derive(Debug)]
pub enum CamexError {
    /// Two operands disagree on shape for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand has a shape the named operation cannot accept.
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    /// `backward` was called on a non-scalar value.
    NonScalarLoss { shape: Vec<usize> },
    /// An index is out of bounds for the named operation.
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    /// Numeric preconditions violated (non-finite input, NaN loss, ...).
    Numeric { op: &'static str, detail: String },
    /// An API contract was violated (bad argument combination, unsupported mode).
    Contract { detail: String },
    /// A weighted combination has degenerate (all-zero) weights at some entry.
    DegenerateWeights { entry: usize },
    /// A verification oracle refused to run or detected an unusable setup.
    Oracle { detail: String },
    /// Configuration file problems (parse errors, unknown or invalid keys).
    Config { detail: String },
    /// Checkpoint bytes are malformed, truncated, or fail integrity checks.
    Format { detail: String },
    /// Underlying I/O failure.
    Io(std::io::Error),
}

fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join(", "))
}

impl fmt::Display for CamexError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CamexError::ShapeMismatch { op, lhs, rhs } => write!(
                f,
                "{op}: shape mismatch between {} and {}",
                fmt_shape(lhs),
                fmt_shape(rhs)
            ),
            CamexError::InvalidShape { op, shape, detail } => {
                write!(f, "{op}: invalid shape {}: {detail}", fmt_shape(shape))
            }
            CamexError::NonScalarLoss { shape } => write!(
                f,
                "backward requires a scalar loss, got shape {}",
                fmt_shape(shape)
            ),
            CamexError::IndexOutOfBounds { op, index, bound } => {
                write!(f, "{op}: index {index} out of bounds for size {bound}")
            }
            CamexError::Numeric { op, detail } => write!(f, "{op}: numeric error: {detail}"),
            CamexError::Contract { detail } => write!(f, "contract violation: {detail}"),
            CamexError::DegenerateWeights { entry } => {
                write!(f, "degenerate weights: total weight is zero at entry {entry}")
            }
            CamexError::Oracle { detail } => write!(f, "oracle error: {detail}"),
            CamexError::Config { detail } => write!(f, "config error: {detail}"),
            CamexError::Format { detail } => write!(f, "format error: {detail}"),
            CamexError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for CamexError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CamexError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for CamexError {
    fn from(e: std::io::Error) -> Self {
        CamexError::Io(e)
    }
}
