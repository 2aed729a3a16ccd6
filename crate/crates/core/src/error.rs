use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{primitive}: shape mismatch {shapes:?}: {detail}")]
    Shape {
        primitive: &'static str,
        shapes: Vec<Vec<usize>>,
        detail: String,
    },

    #[error("{primitive}: non-finite input")]
    NonFinite { primitive: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("loss is detached: no input requires a gradient")]
    Detached,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: parse error at byte {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    #[error("{path}: line {line}: {message}")]
    Csv {
        path: String,
        line: u64,
        message: String,
    },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(
        primitive: &'static str,
        shapes: &[&[usize]],
        detail: impl Into<String>,
    ) -> Self {
        Error::Shape {
            primitive,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
