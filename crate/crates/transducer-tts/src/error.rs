//! Crate-wide error type and exit-code mapping.

use std::path::PathBuf;

/// Errors surfaced by any layer of the crate.
///
/// The CLI maps these onto process exit codes: usage/config problems exit 2,
/// I/O problems 3, numerical failures 4 and degenerate outputs 5.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index out of range in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("tokenization error: unknown character {ch:?}")]
    UnknownChar { ch: char },

    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGrad { param: String },

    #[error("non-finite loss at step {step}: rnnt={rnnt}, ce={ce}")]
    NonFiniteLoss { step: u64, rnnt: f64, ce: f64 },

    #[error("decode produced an empty code sequence")]
    EmptyDecode,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad file format in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wrap an I/O error with the path it happened on.
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Process exit code for this error per the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::UnknownChar { .. } => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Json(_) => 3,
            Error::NonFiniteGrad { .. } | Error::NonFiniteLoss { .. } => 4,
            Error::EmptyDecode => 5,
            Error::Shape { .. } | Error::Index { .. } | Error::Validation(_) => 2,
        }
    }
}
