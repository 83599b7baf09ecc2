use thiserror::Error;

/// Errors produced by the simulator and its front ends.
#[derive(Debug, Error)]
pub enum ClockError {
    /// Invalid configuration (bad parameter value, inconsistent combination,
    /// malformed config file). Carries the offending key path where known.
    #[error("config error: {0}")]
    Config(String),

    /// A Bayesian update wiped out the posterior: the observed record has
    /// essentially zero probability under the current prior, which signals a
    /// phase excursion outside the window the protocol can represent.
    #[error("degenerate posterior update: predictive mass {mass:.3e} below threshold")]
    DegenerateUpdate { mass: f64 },

    /// A trial was aborted (currently only by degenerate adaptive updates).
    #[error("trial {trial} aborted at step {step}, ensemble {ensemble}: {source}")]
    TrialAborted {
        trial: u64,
        step: u64,
        ensemble: usize,
        #[source]
        source: Box<ClockError>,
    },

    /// Stability requested over an empty (or fully aborted) trial set.
    #[error("no completed trials to aggregate")]
    EmptyReport,

    /// Input trace shorter than the spectral estimator can segment.
    #[error("trace too short for spectral estimate: {len} samples, need at least {min}")]
    TraceTooShort { len: usize, min: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ClockError>;

impl ClockError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        ClockError::Config(msg.into())
    }

    /// Exit code contract: 0 success, 1 config error, 2 runtime abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            ClockError::Config(_) => 1,
            _ => 2,
        }
    }
}
