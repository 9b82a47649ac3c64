use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("degenerate {measure}: {reason}")]
    Degenerate {
        measure: &'static str,
        reason: &'static str,
    },

    #[error("input too large for {measure}: n = {n} exceeds cap {cap}; subsample first")]
    TooLarge {
        measure: &'static str,
        n: usize,
        cap: usize,
    },

    #[error("scoring failed for input {index}: {reason}")]
    Scoring { index: usize, reason: String },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable identifier of the failure kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::NonFinite(_) => "non_finite",
            Error::Empty(_) => "empty",
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Diverged { .. } => "diverged",
            Error::Degenerate { .. } => "degenerate",
            Error::TooLarge { .. } => "too_large",
            Error::Scoring { .. } => "scoring",
            Error::Format(f) => f.code(),
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

/// Failures when decoding one of the binary file formats.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: Vec<u8>, found: Vec<u8> },

    #[error("unsupported version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("unsupported dtype code {0}")]
    Dtype(u8),

    #[error("dimension overflow: product of {0:?} does not fit in memory")]
    DimOverflow(Vec<u64>),

    #[error("truncated at byte {offset}: expected {expected} bytes, found {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed data at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },

    #[error("trailing bytes after offset {0}")]
    Trailing(usize),
}

impl FormatError {
    /// Stable identifier, used in machine-readable CLI errors.
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::BadMagic { .. } => "bad_magic",
            FormatError::Version { .. } => "version",
            FormatError::Dtype(_) => "dtype",
            FormatError::DimOverflow(_) => "dim_overflow",
            FormatError::Truncated { .. } => "truncated",
            FormatError::Checksum { .. } => "checksum",
            FormatError::Malformed { .. } => "malformed",
            FormatError::Trailing(_) => "trailing",
        }
    }
}
