use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid configuration at `{path}`: {message}")]
    InvalidConfig { path: String, message: String },

    #[error("action index {0} is outside the grid")]
    UnknownAction(usize),

    #[error("covariance is not positive definite even with jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),

    #[error("ISSf bound undefined for phi = 0")]
    UnboundedIssf,

    #[error("grid of {size} points exceeds the dense-draw limit of {limit}")]
    GridTooLarge { size: usize, limit: usize },

    #[error("feedback provider failed: {0}")]
    Provider(String),

    #[error("unknown session `{0}`")]
    UnknownSession(String),

    #[error("unknown query `{0}`")]
    UnknownQuery(String),

    #[error("query `{0}` was already answered")]
    DuplicateSubmission(String),

    #[error("stale session version: expected {expected}, current {current}")]
    StaleVersion { expected: u64, current: u64 },

    #[error("unknown rollout `{0}`")]
    UnknownRollout(String),

    #[error("malformed submission: {0}")]
    MalformedSubmission(String),

    #[error("simulated crash at {0}")]
    InjectedCrash(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            path: path.into(),
            message: message.into(),
        }
    }
}
