//! Crate-wide error type.

use thiserror::Error;

/// Which argument of a two-signal operation was degenerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrArg {
    First,
    Second,
}

impl std::fmt::Display for CorrArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CorrArg::First => write!(f, "first"),
            CorrArg::Second => write!(f, "second"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid filter spec: {0}")]
    InvalidSpec(String),

    #[error("signal too short: {got} samples, need more than {need}")]
    InsufficientLength { got: usize, need: usize },

    #[error("upsampling not supported: input {input_hz} Hz -> requested {target_hz} Hz")]
    UnsupportedDirection { input_hz: f64, target_hz: f64 },

    #[error("invalid subband count: {0} (need at least 2)")]
    InvalidCount(usize),

    #[error("sample-rate mismatch: {left} Hz vs {right} Hz")]
    RateMismatch { left: f64, right: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate variance in {arg} argument{}", detail.as_ref().map(|d| format!(" ({d})")).unwrap_or_default())]
    DegenerateVariance { arg: CorrArg, detail: Option<String> },

    #[error("degenerate prediction: decoder output has zero variance")]
    DegeneratePrediction,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient at component {index}")]
    NonFiniteGradient { index: usize },

    #[error("data quality: {0}")]
    DataQuality(String),

    #[error("too few trials: have {got}, need at least {need}")]
    InsufficientTrials { got: usize, need: usize },

    #[error("corrupt bundle: {file}: {reason}")]
    CorruptBundle { file: String, reason: String },

    #[error("unsupported bundle format version {0}")]
    UnsupportedVersion(u32),

    #[error("too few pairs for paired test: have {got}, need at least {need}")]
    InsufficientPairs { got: usize, need: usize },

    #[error("degenerate regressor: x is constant")]
    DegenerateRegressor,

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("spec parse error: {0}")]
    SpecParse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
