//! Dense-array values, a reverse-mode tape, and small feed-forward networks.
//!
//! Everything is `f64`. A [`Tape`] is built fresh for each forward pass; ops
//! on [`Var`] record onto it, and [`Var::backward`] replays them in reverse.

mod network;
mod tape;
mod tensor;

pub use network::{Activation, LayerSpec, Network};
pub use tape::{fd_check, gradient, Gradients, Tape, Var};
pub use tensor::{ParameterSet, Tensor};


#[cfg(test)]
pub(crate) use tape::softplus;
