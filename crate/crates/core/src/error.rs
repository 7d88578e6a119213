use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("linear algebra failure: {0}")]
    LinAlg(String),
    #[error("config error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Error {
    Error::Shape {
        context: context.into(),
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
