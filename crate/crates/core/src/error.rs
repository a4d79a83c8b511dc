use thiserror::Error;

/// Errors surfaced by the simulation, analysis and estimation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("rotation angle {0} is too close to pi for a unique logarithm")]
    AmbiguousLogarithm(f64),
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("invalid trajectory specification: {0}")]
    InvalidTrajectory(String),
    #[error("time {t} outside trajectory range [0, {duration}]")]
    TimeOutOfRange { t: f64, duration: f64 },
    #[error("timestamps are not uniformly spaced (sample {index})")]
    NonUniformTimestamps { index: usize },
    #[error("integration step {0} s exceeds the 0.01 s limit")]
    StepTooLarge(f64),
    #[error("invalid bias specification: {0}")]
    InvalidBias(String),
    #[error("degenerate sampling region: {0}")]
    DegenerateRegion(String),
    #[error("point set is coplanar (smallest singular value {0:e})")]
    Coplanar(f64),
    #[error("signal window needs at least 2 samples, got {0}")]
    EmptyWindow(usize),
    #[error("scenes are not comparable: {0}")]
    MismatchedScenes(String),
    #[error("gauge transform is invalid: {0}")]
    InvalidGauge(String),
    #[error("filter initialization failed: {0}")]
    FilterInit(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{context}: {message}")]
    Io { context: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
