use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("coordinate vector has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate boundary: set is {0}")]
    DegenerateBoundary(&'static str),
    #[error("duplicate centers at positions {0} and {1}")]
    DuplicateCenters(usize, usize),
    #[error("empty set: {0}")]
    EmptySet(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("walk exceeded the horizon {horizon} before finishing")]
    HorizonExceeded { horizon: f64 },
    #[error("linear solve did not converge: residual {residual:e} after {iterations} iterations")]
    SolverNotConverged { residual: f64, iterations: usize },
    #[error("eigen iteration did not converge: residual {residual:e} after {iterations} iterations")]
    EigenNotConverged { residual: f64, iterations: usize },
    #[error("state space is disconnected")]
    Disconnected,
    #[error("boxes {0} and {1} overlap")]
    OverlappingBoxes(usize, usize),
    #[error("window does not fit: {0}")]
    WindowTooLarge(String),
    #[error("io error: {0}")]
    Io(String),
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
