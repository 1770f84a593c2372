use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// A mechanism, law, schedule or config violates its invariants.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// An argument is outside the domain on which the quantity is finite.
    #[error("domain error: {0}")]
    Domain(String),

    /// θκ′(θ) − κ(θ) stays negative on the whole domain.
    #[error("no root of theta*kappa'(theta) - kappa(theta) = 0: {0}")]
    NoRoot(String),

    #[error("model assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("enumeration too large: {terms} terms exceeds limit {limit}")]
    TooLarge { terms: f64, limit: f64 },

    #[error("exact-mode population {size} exceeds limit {limit}")]
    ExactBlowup { size: usize, limit: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("replicate {replicate}: {source}")]
    Replicate {
        replicate: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Strips any replicate wrapper.
    pub fn root_cause(&self) -> &Error {
        match self {
            Error::Replicate { source, .. } => source.root_cause(),
            e => e,
        }
    }
}
