use thiserror::Error;

/// Errors raised by the engine. Each variant maps to one failure class of the
/// public operations; the CLI turns them into exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("label {0} is not an active class of the head")]
    Label(usize),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("reference accuracy for task {task} must be positive, got {value}")]
    Reference { task: usize, value: f64 },

    #[error("state error: {0}")]
    State(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(
    op: &'static str,
    left: (usize, usize),
    right: (usize, usize),
) -> Result<T> {
    Err(Error::Shape { op, left, right })
}
