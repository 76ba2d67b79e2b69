use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("stage {stage} out of range 0..={horizon}")]
    StageOutOfRange { stage: usize, horizon: usize },

    #[error("node {0} is not a leaf")]
    NotALeaf(usize),

    #[error("mode {mode} out of range for {modes} modes")]
    ModeOutOfRange { mode: usize, modes: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("non-smooth point: {0}")]
    NonSmooth(String),

    #[error("missing linearization bundle for upper-bound collision terms")]
    MissingLinearization,

    #[error("surrogate variant mismatch: expected {expected}, got {got}")]
    VariantMismatch {
        expected: &'static str,
        got: &'static str,
    },

    #[error("initial state violates the state constraints: {0}")]
    InfeasibleState(String),

    #[error("numerical failure in inner solver: {0}")]
    NumericalFailure(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
