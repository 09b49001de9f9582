use thiserror::Error;

pub type Result<T> = std::result::Result<T, BarError>;

#[derive(Debug, Error)]
pub enum BarError {
    /// An argument lies outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    /// The request is well-formed but exceeds what the component supports
    /// (a materialized 2^k vocabulary that is too large, oracle limits).
    #[error("capability error: {0}")]
    Capability(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BarError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        BarError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> u8 {
        match self {
            BarError::Config { .. } => 2,
            BarError::Capability(_) => 3,
            BarError::Numeric(_) => 4,
            _ => 1,
        }
    }
}
