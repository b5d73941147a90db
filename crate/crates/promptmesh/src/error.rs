use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Array shape does not match what an operation expects.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A value is outside the mathematical domain of an operation
    /// (e.g. non-positive inverse depth).
    #[error("domain error in {context}: {message}")]
    Domain {
        context: &'static str,
        message: String,
    },

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset / archive schema problems.
    #[error("data error: {0}")]
    Data(String),

    /// Schema version mismatch between writer and reader.
    #[error("schema version mismatch: file has {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },

    /// Numeric failure (NaN/Inf encountered where finite values are required).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn domain(context: &'static str, message: impl Into<String>) -> Self {
        Error::Domain {
            context,
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::SchemaVersion { .. } | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
            Error::Shape { .. } | Error::Domain { .. } => 1,
        }
    }
}
