use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Backend,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid logits: {0}")]
    InvalidLogits(String),

    #[error("invalid temperature {theta}: must be at least {min}")]
    InvalidTemperature { theta: f64, min: f64 },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid draft probability {0}: the draft token must have positive probability")]
    InvalidDraftProbability(f64),

    #[error("degenerate residual: draft and target distributions leave no positive mass to resample")]
    DegenerateResidual,

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("fitted slope {0} is not positive; the uncertainty/rejection relation is unusable")]
    NonIncreasingFit(f64),

    #[error("empty sample set: {0}")]
    EmptySamples(&'static str),

    #[error("invalid histogram: {0}")]
    InvalidHistogram(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("planted rejection mean {target} is infeasible; achievable range is [0, {max:.4}]")]
    CalibrationInfeasible { target: f64, max: f64 },

    #[error("token {token} out of vocabulary of size {size}")]
    OutOfVocabulary { token: u32, size: usize },

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) | Error::OutOfVocabulary { .. } => ErrorKind::Config,
            Error::Backend(_) => ErrorKind::Backend,
            Error::Io(_) | Error::Json(_) => ErrorKind::Io,
            _ => ErrorKind::Numerical,
        }
    }
}

/// Failures of a model backend, local or remote.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("backend disconnected: {0}")]
    Disconnected(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("logit length mismatch: expected {expected}, got {got}")]
    LogitLengthMismatch { expected: usize, got: usize },

    #[error("backend reported error: {0}")]
    Remote(String),

    #[error("backend i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("model file: {0}")]
    ModelFile(String),

    #[error("empty corpus")]
    EmptyCorpus,
}
