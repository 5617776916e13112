use fes_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Bad configuration or invalid arguments (CLI exit code 1).
    #[error("configuration error: {0}")]
    Config(String),

    /// Broken or missing corpus/checkpoint data (CLI exit code 2).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite losses or other numeric breakdown (CLI exit code 3).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A structural invariant of a document or graph does not hold.
    #[error("structural error: {0}")]
    Structural(String),

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::Config(_) => 1,
            CoreError::Numerical(_) => 3,
            CoreError::Data(_)
            | CoreError::Structural(_)
            | CoreError::Autodiff(_)
            | CoreError::Io(_)
            | CoreError::Json(_) => 2,
        }
    }
}
