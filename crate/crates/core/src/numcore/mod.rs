//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
