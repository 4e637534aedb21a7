use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{layer}: shape mismatch in dimension {dim}: expected {expected}, got {got}")]
    ShapeMismatch {
        layer: String,
        dim: usize,
        expected: usize,
        got: usize,
    },
    #[error("{layer}: expected rank {expected}, got shape {got:?}")]
    RankMismatch {
        layer: String,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
