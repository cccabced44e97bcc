//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Values live on a [`Tape`]; each operation on a [`Var`] records a gradient
//! rule, and [`Tape::backward`] replays them in reverse. Model parameters are
//! held as [`DiffArray`]s outside the tape and copied in as leaves for each
//! step; [`Gradients::accumulate_into`] writes the results back.

mod array;
mod kernels;
pub mod linalg;
mod tape;

pub use array::DiffArray;
pub use kernels::Padding;
pub use tape::{ElementwiseKind, Gradients, Operand, ReduceKind, Tape, Var};
