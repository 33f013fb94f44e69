//! Dense-tensor reverse-mode automatic differentiation.
//!
//! [`Tensor`] is the value type; a [`Tape`] records every operation applied
//! to [`Var`] handles and replays them backwards. Parameters enter a tape as
//! trainable leaves for one forward/backward pass and are read back out as
//! gradients, so networks stay plain data between steps.

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
