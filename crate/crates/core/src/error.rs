use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate `{coordinate}` is on the boundary of its domain (value {value})")]
    Boundary { coordinate: String, value: f64 },

    #[error("expected a vector of dimension {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("entry {index} is not finite")]
    NonFinite { index: usize },

    #[error("state is not physical: smallest eigenvalue {min_eigenvalue:.3e}")]
    NonPhysical { min_eigenvalue: f64 },

    #[error("invalid detector side: {0}")]
    InvalidDetector(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("degenerate ratio prior: every draw gives zero likelihood")]
    DegeneratePrior,

    #[error("maximum-likelihood fit did not converge (gradient norm {gradient_norm:.3e})")]
    NotConverged { gradient_norm: f64 },

    #[error("all {starts} starts failed to converge")]
    AllStartsFailed { starts: usize },

    #[error("sample set has provenance `{found}`, expected `{expected}`")]
    Provenance { expected: &'static str, found: &'static str },

    #[error("no posterior draws with lambda >= {threshold:e}")]
    NoDrawsAboveThreshold { threshold: f64 },

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code, used as the CLI exit status.
    pub fn code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            Error::Parse { .. } => 3,
            Error::InvalidConfig(_) | Error::InvalidDetector(_) => 4,
            Error::Dimension { .. } | Error::NonFinite { .. } | Error::Boundary { .. } => 5,
            Error::NonPhysical { .. } => 6,
            Error::NotConverged { .. } | Error::AllStartsFailed { .. } => 7,
            Error::Provenance { .. }
            | Error::NoDrawsAboveThreshold { .. }
            | Error::TooFewSamples { .. } => 8,
            Error::DegeneratePrior | Error::Unsupported(_) => 9,
        }
    }
}
