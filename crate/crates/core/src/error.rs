use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("sequence length error: {0}")]
    Length(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("split error: user {user} has {count} events, at least 3 are required")]
    Split { user: u32, count: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corruption error: {0}")]
    Corruption(String),

    #[error("truncated input at byte offset {offset}: {detail}")]
    Truncated { offset: u64, detail: String },

    #[error("not found: item ids {0:?}")]
    NotFound(Vec<u32>),

    #[error("version mismatch: {0}")]
    Version(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
