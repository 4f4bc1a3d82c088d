use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("claim {claim_id}: truth unavailable (no records beyond the evaluation horizon)")]
    TruthUnavailable { claim_id: String },

    #[error("unknown claim id {0}")]
    UnknownClaim(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("training diverged at epoch {epoch}: validation loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("chain-ladder factor for development period {period} has a non-positive denominator")]
    ZeroDenominator { period: usize },

    #[error("ratio undefined: {0}")]
    UndefinedRatio(String),

    #[error("shape parameter {shape} >= 1: the tail mean is infinite")]
    InfiniteMean { shape: f64 },

    #[error("optimizer did not converge after {iterations} iterations (last value {last_value}, trace: {trace})")]
    NoConvergence {
        iterations: usize,
        last_value: f64,
        trace: String,
    },

    #[error("separation detected in period group {group}")]
    Separation { group: String },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake-case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::TruthUnavailable { .. } => "truth_unavailable",
            Error::UnknownClaim(_) => "unknown_claim",
            Error::InvalidConfig(_) => "invalid_config",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::Degenerate(_) => "degenerate",
            Error::Empty(_) => "empty",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::Diverged { .. } => "diverged",
            Error::ZeroDenominator { .. } => "zero_denominator",
            Error::UndefinedRatio(_) => "undefined_ratio",
            Error::InfiniteMean { .. } => "infinite_mean",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Separation { .. } => "separation",
            Error::ModelFormat(_) => "model_format",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
