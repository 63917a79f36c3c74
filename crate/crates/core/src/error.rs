use thiserror::Error;

/// Errors produced by configuration parsing, planning and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in field `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no schedulable rank available")]
    NoCapacity,

    #[error("missing routing entry for request {0}")]
    MissingRouting(u64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("trace error at line {line}: {message}")]
    Trace { line: usize, message: String },

    #[error("system `{system}` failed: {source}")]
    Recipe {
        system: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse { field: field.into(), message: message.into() }
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation { field: field.into(), message: message.into() }
    }

    /// True for errors caused by bad user input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::Validation { .. }
            | Error::Unsupported(_)
            | Error::Config(_)
            | Error::Trace { .. }
            | Error::Json(_)
            | Error::Csv(_) => true,
            Error::Recipe { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
