use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unit '{unit}': event time {time} outside window [{start}, {end}]")]
    OutOfWindow {
        unit: String,
        time: f64,
        start: f64,
        end: f64,
    },

    #[error("unknown unit '{unit}' (available: {available})")]
    UnknownUnit { unit: String, available: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "Cholesky factorization failed after jitter {max_jitter:e}; \
         condition estimate {condition_estimate:e}"
    )]
    IllConditioned { condition_estimate: f64, max_jitter: f64 },

    #[error(
        "intensity exponent {exponent:.1} exceeds overflow guard at t = {time}; \
         rescale the time axis or the hyperparameters"
    )]
    Overflow { exponent: f64, time: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("intensity {rate} at t = {time} exceeds thinning bound {bound}")]
    BoundViolation { time: f64, rate: f64, bound: f64 },

    #[error("rejection sampling budget of {0} draws exhausted")]
    RejectionExhausted(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that come from the numerics rather than the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::IllConditioned { .. }
                | Error::Overflow { .. }
                | Error::NotPositiveDefinite(_)
                | Error::RejectionExhausted(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
