//! Minimal dense-tensor math with reverse-mode automatic differentiation,
//! momentum SGD and AdaDelta. Everything is 64-bit and deterministic; the
//! computation graph is built fresh for every forward pass.

mod graph;
mod params;
mod tensor;

pub use graph::{grad_check, Graph, NodeId};
pub use params::ParamStore;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient while propagating through {op}")]
    BackwardNonFinite { op: &'static str },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward already ran on this graph; call reset_grads first")]
    BackwardTwice,
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("gradient check produced a non-finite value at coordinate {index}")]
    GradCheckNonFinite { index: usize },
    #[error("parameter {name:?} has no staged gradient")]
    MissingGradient { name: String },
    #[error("parameter {name:?} already exists")]
    DuplicateParam { name: String },
    #[error("unknown parameter {name:?}")]
    UnknownParam { name: String },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: Vec<u8> },
    #[error("unsupported format version {found} (expected {expected})")]
    BadVersion { expected: u8, found: u8 },
    #[error("corrupt file: {detail}")]
    Corrupt { detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
