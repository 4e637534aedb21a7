use thiserror::Error;

#[derive(Debug, Error)]
pub enum MdvcError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("corrupt data: {0}")]
    Corruption(String),
    #[error("frame {height}x{width} is not divisible by the downsampling factor {factor}")]
    Indivisible { height: usize, width: usize, factor: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token value {value} outside alphabet [-{bound}, {bound}]")]
    OutOfAlphabet { value: i32, bound: i32 },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("trace error: {0}")]
    Trace(String),
    #[error(transparent)]
    Nn(#[from] mdvc_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl MdvcError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            MdvcError::Config(_) | MdvcError::Json(_) | MdvcError::Indivisible { .. } | MdvcError::Trace(_) => 2,
            MdvcError::Checkpoint(_) => 3,
            MdvcError::Nn(mdvc_nn::NnError::Checkpoint(_)) => 3,
            MdvcError::Corruption(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, MdvcError>;
