use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("integration step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("non-finite state or derivative at t = {t}")]
    NonFinite { t: f64 },
    #[error("residual gain must be non-negative, got {0}")]
    InvalidGain(f64),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least 2 samples, got {0}")]
    NotEnoughSamples(usize),
    #[error("sample at t = {got} does not follow t = {last}")]
    NonMonotoneTimestamp { last: f64, got: f64 },
    #[error("non-finite sample at t = {0}")]
    NonFiniteSample(f64),
    #[error("prediction diverged: {0}")]
    Diverged(#[from] DynamicsError),
    #[error("non-finite loss or gradient")]
    NonFiniteLoss,
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("parameter vector has {got} entries, expected {expected}")]
    ParamCount { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("bad model file: {0}")]
    Model(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("invalid value: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("integrator blow-up at t = {t}")]
    BlowUp {
        t: f64,
        /// Rows recorded before the failure.
        partial: Box<crate::sim::TrajectoryLog>,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("metrics: {0}")]
    Metrics(String),
}
