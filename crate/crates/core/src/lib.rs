//! Bottom-up region selection plus top-down attention models for image
//! captioning and visual question answering, trained with cross entropy,
//! self-critical reward fine-tuning, and AdaDelta. Runs entirely on the CPU
//! over pre-computed region features; a synthetic shape-world generator
//! provides desk-scale datasets.

pub mod numcore;
pub mod captioner;
pub mod corpus;
pub mod metrics;
pub mod regions;
pub mod scst;
pub mod vqa;

pub use numcore::{Graph, NodeId, NumError, ParamStore, Tensor};
