//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! Values are `f64` matrices ([`Array2`]); a [`Graph`] records each
//! primitive as it is evaluated and [`Graph::backward`] accumulates
//! gradients of a scalar loss in one reverse sweep. Dropout masks and other
//! random draws enter as constants, so stochastic forward passes remain
//! differentiable with respect to the network parameters.

mod array;
mod check;
mod graph;

pub use array::Array2;
pub use check::{check_gradients, GradientReport, InputGradientReport};
pub use graph::{softplus, Gradients, Graph, Node, NodeId, Op};
