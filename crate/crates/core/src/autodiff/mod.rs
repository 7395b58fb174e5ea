//! Reverse-mode automatic differentiation on dense 2-D tensors.
//!
//! A [`Tape`] records every operation applied to tracked tensors; calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients
//! for every [`Parameter`] that was touched. One tape spans one training
//! clip, which is what makes back-propagation through time fall out of plain
//! reverse mode: hidden states carried across frames are ordinary nodes on
//! the same tape.
//!
//! Everything is 64-bit; identical inputs and seeds give bitwise-identical
//! values and gradients.

pub mod checkpoint;
pub mod fd;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::AdamW;
pub use params::{GradMap, ParamId, ParamStore, Parameter};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
