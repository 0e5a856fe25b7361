use thiserror::Error;

/// Errors raised across the lab pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("index out of range: {what} {index} (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("arity mismatch: {0}")]
    Arity(String),

    #[error("invalid probability table: {0}")]
    InvalidDistribution(String),

    #[error("posterior undefined at query {query}, response {response}: both class densities are zero")]
    UndefinedPosterior { query: usize, response: usize },

    #[error("slot {slot} has a single label class ({count} samples, all labelled {label})")]
    SingleClass {
        slot: usize,
        label: u8,
        count: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step} (datum indices {indices:?})")]
    NonFiniteLoss { step: usize, indices: Vec<usize> },

    #[error("policy is frozen; parameter updates are rejected")]
    FrozenPolicy,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dual bracketing failed on log-lambda interval [{lo}, {hi}]")]
    Bracketing { lo: f64, hi: f64 },

    #[error("slope undefined: {0}")]
    UndefinedSlope(&'static str),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
