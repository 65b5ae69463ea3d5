use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error("tensor name sets differ: {0}")]
    NameMismatch(String),

    #[error("shape mismatch for tensor `{name}`: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("task vector fingerprints differ: {0} vs {1}")]
    FingerprintMismatch(String, String),

    #[error("adapter mismatch: {0}")]
    AdapterMismatch(String),

    #[error("cannot resolve adapter layer `{0}` to a base tensor")]
    UnresolvedLayer(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("unknown language code `{0}`")]
    UnknownLanguage(String),

    #[error("evaluator failed: {0}")]
    Evaluator(String),

    #[error("invalid cleaning rule `{pattern}`: {source}")]
    Rule {
        pattern: String,
        #[source]
        source: regex::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
