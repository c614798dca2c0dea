//! Dense n-dimensional arrays and the reverse-mode differentiation tape.

mod data;
mod tape;

pub use data::TensorData;
pub use tape::{Gradients, Padding, ReduceOp, Tape, Var};
