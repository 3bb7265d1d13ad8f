use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate document id {0:?}")]
    DuplicateId(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("model fingerprint {model} does not match index fingerprint {index}")]
    FingerprintMismatch { model: String, index: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unknown document id {0:?}")]
    UnknownDocument(String),

    #[error("verifier request for document {doc_id:?} failed: {message}")]
    Verifier { doc_id: String, message: String },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(
        "gradient check failed at step {step}: relative error {rel_error:.3e} at ({row}, {col})"
    )]
    GradientCheck {
        step: usize,
        row: usize,
        col: usize,
        rel_error: f64,
    },

    #[error("missing traces for queries: {0:?}")]
    MissingTraces(Vec<String>),

    #[error("traces reference unknown queries: {0:?}")]
    UnknownTraces(Vec<String>),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
