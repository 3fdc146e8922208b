use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("invalid header: {0}")]
    Header(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty arm: {0}")]
    EmptyArm(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid count vector: {0}")]
    InvalidCounts(String),

    #[error("instance too large for exhaustive enumeration: {0}")]
    TooLarge(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("id mismatch: {0}")]
    IdMismatch(String),

    #[error("no finite bound: {0}")]
    NoFiniteBound(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
