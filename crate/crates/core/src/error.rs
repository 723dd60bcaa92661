use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stale forward cache: parameters changed since the forward pass")]
    StaleCache,
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("markov chain did not converge to a stationary distribution after {0} iterations")]
    NotConverged(usize),
    #[error("vocabulary overflow: {0}")]
    VocabOverflow(String),
    #[error("topology violation: {0}")]
    Topology(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("serialization: {0}")]
    Serialization(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
