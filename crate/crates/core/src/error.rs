//! Error type shared by every stage of the engine.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A declared column is missing or a recipe references an absent column.
    #[error("schema error: {0}")]
    Schema(String),

    /// Input data violates a panel invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("panel is empty: {0}")]
    EmptyPanel(String),

    /// Inconsistent or out-of-range configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("fit error: {0}")]
    Fit(String),

    /// Malformed arguments to a pure function (lengths, ranges).
    #[error("input error: {0}")]
    Input(String),

    #[error("completeness error: {0}")]
    Completeness(String),

    #[error("monotonicity error: {0}")]
    Monotonicity(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("table bounds error: {0}")]
    TableBounds(String),

    /// Error raised inside a pipeline stage, tagged with the stage name.
    #[error("stage `{stage}` failed")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// failure while computing.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Schema(_) | Error::Validation(_) | Error::Config(_) | Error::EmptyPanel(_) => {
                true
            }
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
