//! Dense reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] owns every value computed during one forward pass. Operations
//! append nodes and return [`Var`] handles; [`Graph::backward`] walks the tape
//! in reverse and accumulates gradients into every leaf created with
//! [`Graph::variable`]. The operator set is deliberately small: exactly what
//! the shell convolution and its classifier heads need.

mod graph;
pub mod gradcheck;
mod real;

pub use graph::{Graph, TensorError, Var};
pub use real::Real;
