use thiserror::Error;

/// Errors raised by the simulation and estimation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the formula.
    #[error("domain error: {0}")]
    Domain(String),

    /// A model or truncation setting cannot support the requested quantity.
    #[error("configuration error: {0}")]
    Config(String),

    /// A labeled eigenstate or transition is not present in the solution.
    #[error("lookup error: no state labeled {0}")]
    Lookup(String),

    /// Dressed states involved in a dispersive quantity are hybridized.
    #[error("regime error: {0}")]
    Regime(String),

    /// A dispersive-shift formula was evaluated at one of its poles.
    #[error("pole error: {0}")]
    Pole(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// A precondition on the shape of input data was violated.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// No observed peak could be associated with a predicted line.
    #[error("association error: {0}")]
    Association(String),

    /// Malformed structured-text input, with 1-based position.
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn require_positive(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "{name} must be positive and finite, got {value}"
        )))
    }
}
