use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DroError {
    /// A parameter or observation lies outside the domain of the model.
    #[error("domain error: {0}")]
    Domain(String),

    /// An observation outside the family's support, identified by its row index.
    #[error("observation {index} is outside the support of the {family} likelihood (value {value})")]
    OutOfSupport {
        index: usize,
        family: &'static str,
        value: f64,
    },

    /// A posterior whose nominal parameters do not exist.
    #[error("degenerate posterior: {0}")]
    DegeneratePosterior(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// The dual has a negative effective radius and is unbounded below.
    #[error("unbounded dual: effective radius {eps_eff} is negative")]
    Unbounded { eps_eff: f64 },

    #[error("invalid input: {0}")]
    Input(String),

    /// The tilted density cannot be normalised (infinite moment-generating function).
    #[error("infinite normaliser: {0}")]
    InfiniteNormalizer(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("data ingestion error: {0}")]
    Ingestion(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DroError>;
