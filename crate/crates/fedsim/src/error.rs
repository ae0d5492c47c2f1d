use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dim {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("incompatible parameter sets: {0}")]
    Incompatible(String),

    #[error("numeric error in {context}: {detail}")]
    Numeric { context: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("run failed at round {round}, client {client}: {detail}")]
    Runtime {
        round: usize,
        client: usize,
        detail: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::Dim {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }
}
