//! Error type shared across the toolkit.
//!
//! Variants are grouped by who can fix the problem: file-level failures
//! (`Read`/`Write`/`Format`), bad caller input (`Parameter`,
//! `DimensionMismatch`), and inputs that violate an algorithm's
//! preconditions (`Precondition`). The CLI maps these groups onto distinct
//! exit codes.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },

    /// Malformed or unsupported image content (bad magic, 16-bit depth, ...).
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// A caller-supplied value is out of its documented domain.
    #[error("{0}")]
    Parameter(String),

    #[error("dimension mismatch: {a_width}x{a_height} vs {b_width}x{b_height}")]
    DimensionMismatch {
        a_width: usize,
        a_height: usize,
        b_width: usize,
        b_height: usize,
    },

    /// Input violates an algorithm precondition (image too small for the
    /// pyramid depth, block larger than the image, degenerate content).
    #[error("{0}")]
    Precondition(String),
}

impl Error {
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}

/// Checks that two planes share a shape, returning the mismatch otherwise.
pub(crate) fn ensure_same_shape(
    a: (usize, usize),
    b: (usize, usize),
) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            a_width: a.0,
            a_height: a.1,
            b_width: b.0,
            b_height: b.1,
        })
    }
}
