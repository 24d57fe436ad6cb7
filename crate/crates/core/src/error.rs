use thiserror::Error;

/// Everything that can go wrong inside the library.
///
/// Configuration problems and malformed inputs are reported eagerly with
/// enough context to point at the offending key or file; numerical blow-ups
/// during training surface as [`Error::Diverged`] so callers can distinguish
/// them from plain bad input.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid value for `{key}`: {message}")]
    InvalidConfig { key: String, message: String },

    #[error("config file {path}: {message}")]
    ConfigFile { path: String, message: String },

    #[error("{context}: sample pool is empty")]
    EmptyPool { context: &'static str },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training diverged at round {round}: {message}")]
    Diverged { round: usize, message: String },

    #[error("missing report from participant {client}")]
    MissingReport { client: usize },

    #[error("unexpected report from non-participant {client}")]
    UnexpectedReport { client: usize },

    #[error("{path}: {message}")]
    DataFormat { path: String, message: String },

    #[error("trace file {path}: {message}")]
    TraceFormat { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for configuration-key errors.
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            message: message.into(),
        }
    }
}
