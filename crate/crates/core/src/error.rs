use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("subsystem {subsystem}: internal input row {row} is neither connected nor declared unconnected")]
    DanglingInput { subsystem: usize, row: usize },

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("unsupported gain form: {0}")]
    UnsupportedForm(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("abstract policy returned {got} inputs for subsystem {subsystem}, expected {expected}")]
    PolicyDimension {
        subsystem: usize,
        expected: usize,
        got: usize,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
