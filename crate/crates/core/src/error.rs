use thiserror::Error;

/// Errors raised by estimation, simulation and I/O routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive definite{}", component.map(|k| format!(" (component {})", k + 1)).unwrap_or_default())]
    NotPositiveDefinite { component: Option<usize> },

    #[error("numerically singular {what}{}", component.map(|k| format!(" in component {}", k + 1)).unwrap_or_default())]
    Singular { what: &'static str, component: Option<usize> },

    #[error("invalid truncation box: {0}")]
    InvalidBox(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("class {} is empty", k + 1)]
    EmptyClass { k: usize },

    #[error("class {} degenerated (total responsibility {mass:.3e}); re-initialize", k + 1)]
    DegenerateClass { k: usize, mass: f64 },

    #[error("infeasible model: {0}")]
    Infeasible(String),

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("stochastic EM chain degenerated: {0}")]
    ChainDegeneracy(String),

    #[error("calibration failed: achieved misclassification {misclassification:.4}, missing rate {missing_rate:.4}")]
    Calibration {
        misclassification: f64,
        missing_rate: f64,
    },

    #[error("zero denominator: {0}")]
    ZeroDenominator(&'static str),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
