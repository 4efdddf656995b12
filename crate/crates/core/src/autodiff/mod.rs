//! Reverse-mode differentiation, Adam, and a finite-difference checker.

mod adam;
mod gradcheck;
mod graph;
mod param;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use graph::{Graph, NodeId, LOG_FLOOR};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{softmax_rows, Tensor};
