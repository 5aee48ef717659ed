//! Error type shared across the crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors produced by tensor operations, model construction and decoding.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible tensor shapes; both shapes are reported.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Index (e.g. a token id) out of range.
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// Invalid configuration value.
    Config(String),
    /// API misuse, e.g. backward on a non-scalar loss.
    Usage(String),
    /// A computation produced or detected a non-finite value.
    NonFinite(String),
    /// Numerically degenerate input (e.g. a zero row before renormalization).
    Degenerate(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::IndexOutOfRange { what, index, bound } => {
                write!(f, "{what}: index {index} out of range (bound {bound})")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Degenerate(msg) => write!(f, "degenerate input: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
