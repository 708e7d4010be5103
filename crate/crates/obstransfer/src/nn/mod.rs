//! Minimal reverse-mode automatic differentiation with dense and
//! convolutional layers, Adam, and finite-difference gradient verification.
//!
//! The tape is rebuilt every training step; `stop_gradient` is a first-class
//! node because the dynamics-model losses depend on it.

mod adam;
pub mod gradcheck;
mod network;
mod tape;
mod tensor;

pub use adam::{adam_step_over, AdamState};
pub use network::{Layer, Network, NetworkBinding, NetworkSpec, Parameterized};
pub use tape::{Activation, NodeId, Tape};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,
    #[error("missing gradients: run backward and accumulate before stepping")]
    MissingGrads,
    #[error("optimizer state does not match parameters: {0}")]
    OptimizerMismatch(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
}
