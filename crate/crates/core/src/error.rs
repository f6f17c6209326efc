use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("corrupt stream: {0}")]
    CorruptStream(String),

    #[error("rank deficiency: {0}")]
    Rank(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A configuration inequality does not hold. The message names it.
    #[error("config error: {0}")]
    Config(String),

    /// Several configuration violations, reported together.
    #[error("config errors:\n  {}", .0.join("\n  "))]
    ConfigList(Vec<String>),

    /// A run left its theoretical envelope.
    #[error("bound violation: {0}")]
    BoundViolation(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
