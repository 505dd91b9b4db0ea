use thiserror::Error;

/// Errors raised by the core engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Two objects that must agree on shape (basis size, grid size, state
    /// dimension) do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A target distribution carries no mass.
    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    /// Non-finite values appeared while integrating an agent.
    #[error("numerical fault: {0}")]
    NumericalFault(String),

    /// A scenario script failed validation. Each entry names a field path.
    #[error("invalid scenario: {}", .0.join("; "))]
    Validation(Vec<String>),

    /// A request referenced data past the end of a log or grid.
    #[error("out of range: {0}")]
    Range(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
