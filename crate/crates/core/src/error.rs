use thiserror::Error;

/// Errors raised by the library. Each variant belongs to one of three
/// classes (see [`Error::class`]) which front ends map to exit codes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty window: {0}")]
    EmptyWindow(String),

    #[error("border correction: {0}")]
    BorderCorrection(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("singular matrix (condition number {condition:.3e}): {context}")]
    Singular { condition: f64, context: String },

    #[error("optimizer did not converge after {restarts} restarts (best |projected gradient| = {grad_norm:.3e}, best theta = {best_theta:?})")]
    NonConvergence {
        restarts: usize,
        grad_norm: f64,
        best_theta: Vec<f64>,
    },

    #[error("refused: {0}")]
    Refused(String),

    #[error("i/o: {0}")]
    Io(String),
}

/// Coarse error classes, one per exit status of the command-line tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Numerical,
    Geometry,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::Refused(_) | Error::Io(_) => ErrorClass::Usage,
            Error::Numerical(_) | Error::Singular { .. } | Error::NonConvergence { .. } => {
                ErrorClass::Numerical
            }
            Error::EmptyWindow(_) | Error::BorderCorrection(_) => ErrorClass::Geometry,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
