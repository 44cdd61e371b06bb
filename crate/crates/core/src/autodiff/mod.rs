//! Minimal tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Only the operations needed by the compression model, the top-k selector
//! and the retrieval losses are provided. Every op records its inputs on a
//! [`Tape`]; [`Tape::backward`] sweeps the tape once in reverse and returns
//! [`Gradients`] for all tracked nodes. Constants and values produced by
//! [`Var::stop_gradient`] are untracked and never receive gradient.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{concat, stack, Gradients, Tape, Var, TEMPERATURE_FLOOR};
#[allow(unused_imports)]
pub(crate) use tape::{dot, norm, softmax_into};
pub use tensor::Tensor;
