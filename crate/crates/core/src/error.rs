use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument fell outside the set where the quantity is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// The model cannot provide the requested quantity (e.g. an opaque sampler
    /// has no closed-form CDF).
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("minimization did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("sample size {requested} exceeds cap {cap}")]
    Overflow { requested: u64, cap: u64 },

    #[error("empty aggregate")]
    EmptyAggregate,

    #[error("inapplicable model: {0}")]
    InapplicableModel(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
