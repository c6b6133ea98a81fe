//! Error type shared by every subsystem of the lab.

/// Failures surfaced by model construction, compression, training, and metrics.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite activations after layer {layer}")]
    NumericInstability { layer: usize },

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("merge pair ({a}, {b}) touches a person token")]
    PersonTokenMerge { a: usize, b: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, LabError>;

/// Shorthand for the common "expected these dims, got those" case.
pub fn shape_err<T>(context: &'static str, expected: impl ToString, got: impl ToString) -> Result<T> {
    Err(LabError::ShapeMismatch {
        context,
        expected: expected.to_string(),
        got: got.to_string(),
    })
}
