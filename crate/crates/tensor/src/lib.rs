//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! Values are computed eagerly as ops are recorded on a [`Tape`]; calling
//! [`Tape::backward`] on a scalar yields [`Gradients`] for every reachable
//! leaf that requires grad. The tape is rebuilt for every forward pass.

mod error;
mod float;
pub mod io;
mod optim;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use float::{DType, Real};
pub use optim::{Adam, AdamConfig, Moments};
pub use tape::{softmax_in_place, Gradients, Segment, Tape, Var};
pub use tensor::Tensor;
