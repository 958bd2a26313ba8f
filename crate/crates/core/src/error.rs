use thiserror::Error;

/// Errors raised anywhere in the screening engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("training data has a single class ({0} rows); cannot fit")]
    SingleClass(usize),

    #[error("not enough rows: need at least {need}, have {have}")]
    TooFewRows { need: usize, have: usize },

    #[error("could not build class-complete folds after {0} attempts")]
    Folds(usize),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("k = {k} exceeds the {n} available candidates")]
    CapacityExceeded { k: usize, n: usize },

    #[error("estimate undefined: {0}")]
    Undefined(String),

    #[error("degenerate instrument: {0}")]
    DegenerateInstrument(String),

    #[error("missing checkpoint for policy `{policy}` at round {round}")]
    MissingCheckpoint { policy: String, round: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
