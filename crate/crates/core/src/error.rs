//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("degenerate row {row}: no valid entries")]
    DegenerateRow { row: usize },
    #[error("degenerate pool: zero total weight in row {row}")]
    DegeneratePool { row: usize },
    #[error("domain error in {op}: offending value {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("degenerate instance: zero available tokens")]
    DegenerateInstance,
    #[error("exhausted budget: no selectable position remaining")]
    ExhaustedBudget,
    #[error("inconsistent evidence: observed values have zero joint mass")]
    InconsistentEvidence,
    #[error("argument error: {0}")]
    Argument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
