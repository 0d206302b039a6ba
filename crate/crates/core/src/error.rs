use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("corrupt tensor file {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("duplicate checkpoint key {0}")]
    DuplicateKey(String),

    #[error("invariant violated for checkpoint {checkpoint} ({bundle}): {what}")]
    Invariant {
        checkpoint: String,
        bundle: String,
        what: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("validator {validator} is not applicable: {rule}")]
    Inapplicable { validator: String, rule: String },

    #[error("missing {what}")]
    Missing { what: String },

    /// A score that is mathematically undefined for the given input. Scoring
    /// engines record these as invalid cells rather than failing.
    #[error("score undefined: {0}")]
    Undefined(String),

    #[error("selection failed: {0}")]
    Selection(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn missing(what: impl Into<String>) -> Self {
        Error::Missing { what: what.into() }
    }

    pub(crate) fn undefined(msg: impl Into<String>) -> Self {
        Error::Undefined(msg.into())
    }

    /// True for errors that describe a malformed or inconsistent pack.
    pub fn is_format_error(&self) -> bool {
        matches!(
            self,
            Error::Manifest(_)
                | Error::CorruptHeader { .. }
                | Error::UnsupportedDtype(_)
                | Error::Shape(_)
                | Error::DuplicateKey(_)
                | Error::Invariant { .. }
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
