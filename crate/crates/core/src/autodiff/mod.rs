//! Minimal tensor autodiff: primitives, reverse pass, optimizer, checkpoints.

pub mod checkpoint;
mod graph;
pub mod kernels;
pub mod optim;

pub use checkpoint::Checkpoint;
pub use graph::{Graph, Var};
pub use optim::{AdamConfig, OptimizerState};
