use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("argument {value} outside domain [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },

    #[error("no projection onto reference path: {0}")]
    NoProjection(String),

    #[error("frame transformation failed: {0}")]
    FrameTransform(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

pub type Result<T, E = PlanError> = std::result::Result<T, E>;
