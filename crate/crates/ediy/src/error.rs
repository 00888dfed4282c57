use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A file could not be read or decoded during dataset ingestion.
    #[error("ingestion error for {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    /// Invalid configuration (bad field values, missing inputs, empty dataset).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or layer shape mismatch.
    #[error("dimension error in {context}: {reason}")]
    Dimension { context: String, reason: String },

    /// API misuse (consumed tape, wrong branch, mismatched assignment mode).
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite value encountered.
    #[error("numeric error at {context}: {reason}")]
    Numeric { context: String, reason: String },

    /// Keyed parameter collections disagree on structure.
    #[error("structural error: {0}")]
    Structure(String),

    /// A checkpoint file fails its integrity checks.
    #[error("integrity error for tensor {tensor}: {reason}")]
    Integrity { tensor: String, reason: String },

    /// Checkpoint format version is not supported by this build.
    #[error("incompatible checkpoint version {found}, expected {expected}")]
    Incompatible { found: u32, expected: u32 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(context: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Dimension {
            context: context.into(),
            reason: reason.into(),
        }
    }

    pub fn numeric(context: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
