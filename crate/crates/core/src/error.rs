use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong in the core library.
///
/// I/O-adjacent variants carry the offending path; shape errors carry the
/// layer index and kind so a bad model is diagnosable from the message alone.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch at layer {layer} ({kind}): {detail}")]
    ShapeMismatch {
        layer: usize,
        kind: &'static str,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic, not a model container")]
    BadMagic { path: PathBuf },

    #[error("{path}: container version {found} not supported (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: unknown layer kind `{kind}`")]
    UnknownLayerKind { path: PathBuf, kind: String },

    #[error("{path}: malformed manifest: {detail}")]
    Manifest { path: PathBuf, detail: String },

    #[error("{path}: truncated weight data: {detail}")]
    TruncatedBlob { path: PathBuf, detail: String },

    #[error("{path}: weight data length mismatch: {detail}")]
    BlobLengthMismatch { path: PathBuf, detail: String },

    #[error("{path}: bad dataset: {detail}")]
    Dataset { path: PathBuf, detail: String },

    #[error("forward cache does not match model or mode: {0}")]
    StaleCache(String),

    #[error("operation not supported: {0}")]
    Unsupported(String),

    #[error("training diverged: loss became non-finite at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
}
