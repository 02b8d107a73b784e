//! Dense `f32` tensors with a tape-based reverse-mode autodiff graph.
//!
//! The graph records every op applied during a forward pass together with a
//! backward closure. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients for every parameter leaf. All ops are single
//! threaded and deterministic: the same inputs always produce bit-identical
//! outputs and gradients.

mod gemm;
mod graph;
mod optim;
mod param;
mod tensor;

pub use gemm::gemm;
pub use graph::{Gradients, Graph, Var};
pub use optim::{cosine_lr, Adam, AdamConfig, AdamState};
pub use param::{ParamId, ParamStore};
pub use tensor::{ShapeError, Tensor};
