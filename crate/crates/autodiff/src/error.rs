use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("invalid axis {axis} for rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("backward was already run on this graph")]
    BackwardTwice,

    #[error("expected a scalar, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("gradient missing for `{0}` (run backward + export_grads first)")]
    MissingGrad(String),
}
