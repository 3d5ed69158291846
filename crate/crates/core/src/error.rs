use thiserror::Error;

/// Errors produced anywhere in the modelling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),

    #[error("triangle {index} has non-positive signed area {area:e}")]
    ZeroAreaTriangle { index: usize, area: f64 },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-positive {name} at index {index}: {value}")]
    NonPositive {
        name: &'static str,
        index: usize,
        value: f64,
    },

    #[error("matrix is not positive definite (pivot {pivot}, value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("entry ({row}, {col}) lies outside the analysed sparsity pattern")]
    PatternMismatch { row: usize, col: usize },

    #[error("constraint matrix is rank deficient")]
    RankDeficientConstraints,

    #[error("point violates constraints (max residual {residual:e})")]
    ConstraintViolation { residual: f64 },

    #[error("prior elicitation failed: {0}")]
    Elicitation(String),

    #[error("location {index} ({x}, {y}) lies outside the mesh")]
    OutsideMesh { index: usize, x: f64, y: f64 },

    #[error("optimizer did not converge after {iterations} iterations (last gradient norm {grad_norm:e})")]
    Optimizer { iterations: usize, grad_norm: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
