//! Dense `f64` tensors, a tape-based reverse-mode autodiff graph, the layers
//! used by the mdvc codec, Adam, and a binary checkpoint format.

pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use layers::{Conv2d, ConvTranspose2d, Dense, Embedding, LayerNorm, MultiHeadAttention, TransformerBlock};
pub use optim::{Adam, LrSchedule};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
