use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite plant state at t = {t} min: {state:?}")]
    NonFiniteState { t: f64, state: [f64; 3] },

    #[error("controller returned non-finite input {u} at step {step}")]
    NonFiniteControl { step: usize, u: f64 },

    #[error("non-finite estimate passed to controller: {0:?}")]
    NonFiniteEstimate([f64; 3]),

    #[error("innovation variance {0} is not positive; covariance corrupted")]
    CovarianceCorrupted(f64),

    #[error("covariance did not converge within {steps} steps (last change {last_change:e})")]
    NotConverged {
        steps: usize,
        last_change: f64,
        last_sigma: [[f64; 3]; 3],
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("scenario file {path}: {message}")]
    Scenario { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
