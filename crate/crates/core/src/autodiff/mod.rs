//! Reverse-mode automatic differentiation over a fixed operation set.

mod gradcheck;
mod graph;
pub mod kernels;
mod op;
mod tape;

pub use gradcheck::grad_check;
pub use graph::{Eager, Graph};
pub use op::{forward, Op, OpKind};
pub use tape::{Gradients, Tape, Var};
