//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants are kept distinct where callers need to tell failure modes
/// apart (archive corruption kinds, dataset format violations).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor/layer shapes do not compose.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A class or element index is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Filesystem failure while reading or writing `path`.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents could not be decoded.
    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    /// A class directory contained no usable samples.
    #[error("class directory {0} is empty")]
    EmptyClass(String),

    /// A binary container did not start with the expected magic bytes.
    #[error("{container}: bad magic bytes")]
    BadMagic { container: &'static str },

    /// A binary container declared an unsupported format version.
    #[error("{container}: unsupported version {found} (expected {expected})")]
    UnsupportedVersion {
        container: &'static str,
        found: u16,
        expected: u16,
    },

    /// A binary container ended before its declared payload.
    #[error("{container}: truncated, expected {expected} bytes but found {found}")]
    Truncated {
        container: &'static str,
        expected: u64,
        found: u64,
    },

    /// A declared record length disagrees with the payload.
    #[error("{container}: length mismatch: {reason}")]
    LengthMismatch {
        container: &'static str,
        reason: String,
    },

    /// A weight archive was created from a different model spec.
    #[error("weight archive fingerprint mismatch: archive {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },

    /// A NaN/Inf appeared where finite values are guaranteed.
    #[error("numeric failure: {0}")]
    NonFinite(String),

    /// A gradient check exceeded its tolerance.
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
