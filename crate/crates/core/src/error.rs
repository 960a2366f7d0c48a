// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A numerical failure inside an iterative computation.
    #[error("numerical failure in {stage}: {diagnostics}")]
    Numerical { stage: String, diagnostics: String },

    #[error(transparent)]
    Format(#[from] FormatError),
}

impl Error {
    /// `true` for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Numerical { .. })
    }
}

/// Errors raised while reading or writing the on-disk formats.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected \"EMB1\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),

    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),

    #[error("truncated {section}: expected {expected} bytes, found {found}")]
    Truncated {
        section: &'static str,
        expected: u64,
        found: u64,
    },

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),

    #[error("manifest inconsistent with tensor: {0}")]
    ManifestInconsistent(String),

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("report schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FormatError {
    /// Stable machine-readable code for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::BadMagic { .. } => "E_BAD_MAGIC",
            FormatError::UnsupportedVersion(_) => "E_VERSION",
            FormatError::UnsupportedDtype(_) => "E_DTYPE",
            FormatError::Truncated { .. } => "E_TRUNCATED",
            FormatError::TrailingBytes(_) => "E_TRAILING",
            FormatError::ManifestInconsistent(_) => "E_MANIFEST",
            FormatError::Json { .. } => "E_JSON",
            FormatError::SchemaVersion { .. } => "E_SCHEMA",
            FormatError::Io { .. } => "E_IO",
        }
    }
}
