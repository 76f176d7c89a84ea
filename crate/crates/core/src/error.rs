use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("singular triangular system: diagonal entry {index} has magnitude {magnitude:e}")]
    Singular { index: usize, magnitude: f64 },

    #[error("cosine similarity is undefined for a zero vector")]
    UndefinedSimilarity,

    #[error("attack needs history that the trace does not hold: {0}")]
    NeedsHistory(String),

    #[error("insufficient reference population: need {needed} clients, found {found}")]
    InsufficientPopulation { needed: usize, found: usize },

    #[error("malformed dump: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
