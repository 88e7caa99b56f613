use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SpectraError> = std::result::Result<T, E>;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum SpectraError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("timestamps not sorted at row {row} ({prev} >= {next})")]
    Unsorted { row: usize, prev: f64, next: f64 },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Model-file decoding failures.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}, expected \"SPCT\"")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {found} (supported: {supported:?})")]
    UnsupportedVersion { found: u16, supported: &'static [u16] },

    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("file truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("malformed model file: {0}")]
    Malformed(String),
}

impl SpectraError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SpectraError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            SpectraError::Usage(_) | SpectraError::Config(_) => 1,
            SpectraError::Numeric(_) => 3,
            _ => 2,
        }
    }
}
