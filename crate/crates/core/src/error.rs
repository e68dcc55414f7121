use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {0:e} is too small to normalize")]
    DegenerateVector(f64),

    #[error("synthetic spec infeasible: {0}")]
    SpecInfeasible(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("class {0} has no embeddings in this batch")]
    EmptyClass(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("prototype ({class}, {index}) collapsed to a zero blend vector")]
    DegeneratePrototype { class: usize, index: usize },

    #[error("class {class} has {count} samples, at least 2 required")]
    InsufficientData { class: usize, count: usize },

    #[error("covariance matrix is singular")]
    SingularCovariance,

    #[error("score range is degenerate (all values equal)")]
    DegenerateRange,

    #[error("internal error: {0}")]
    Internal(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures of the numerics rather than of the caller's inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_)
                | Error::DegenerateVector(_)
                | Error::DegeneratePrototype { .. }
                | Error::SingularCovariance
        )
    }
}
