use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}, row {row}: {message}")]
    InvalidRow {
        file: String,
        row: usize,
        message: String,
    },

    #[error("{file}: {message}")]
    Schema { file: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("graph: {0}")]
    Graph(String),

    #[error("model: {0}")]
    Model(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(
        "benchmark filter accepted none of {draws} draws; supply more posterior draws \
         (acceptance can be arbitrarily small when the model disagrees with the targets)"
    )]
    NoDrawsAccepted { draws: usize },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn row(file: &str, row: usize, message: impl Into<String>) -> Self {
        Error::InvalidRow {
            file: file.to_string(),
            row,
            message: message.into(),
        }
    }

    /// True for errors caused by malformed or inconsistent user input, as
    /// opposed to failures while computing on valid input.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::InvalidRow { .. }
                | Error::Schema { .. }
                | Error::InvalidInput(_)
                | Error::Graph(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
