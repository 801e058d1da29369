use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("template `{template}`: {message}")]
    Template { template: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("stale input `{path}`: {hint}")]
    Stale { path: PathBuf, hint: String },

    #[error("missing stage dependencies, run first: {}", .0.join(" -> "))]
    MissingStages(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Process exit code used by the CLI: 2 validation, 3 transport, 4 staleness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Transport { .. } => 3,
            Error::Stale { .. } | Error::MissingStages(_) => 4,
            Error::Io { .. } | Error::Internal(_) | Error::Training(_) => 1,
            _ => 2,
        }
    }
}
