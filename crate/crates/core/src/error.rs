use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A graph operation saw inputs it cannot combine.
    #[error("node {node} ({op}): {detail}")]
    Graph {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("{}:{line}: {detail}", path.display())]
    Data {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("config key `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("bundle: {0}")]
    Bundle(String),

    #[error("bundle was trained with mode `{bundle}` but detection requested mode `{requested}`")]
    ModeMismatch { bundle: String, requested: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Data { .. } | Error::Io { .. } => 3,
            Error::ModeMismatch { .. } | Error::Bundle(_) => 4,
            Error::InvalidArgument(_) | Error::Graph { .. } => 1,
        }
    }
}
