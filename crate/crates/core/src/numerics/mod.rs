//! Dense tensors, reverse-mode differentiation, optimizer, and RNG.

pub mod graph;
pub(crate) mod kernels;
pub mod rng;
pub mod store;
pub mod tensor;

pub use graph::{gradient_check, Ctx, Eval, GradCheckReport, Graph, ParamSet, Value};
pub use rng::{RngAlgo, RngState};
pub use store::{AdamW, Init, ParamStore, CHECKPOINT_MAGIC};
pub use tensor::Tensor;
