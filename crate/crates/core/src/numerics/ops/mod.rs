//! Differentiable operations on [`Var`](super::Var).

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod shape;

pub use elementwise::weighted_sum;
pub use norm::LN_EPS;
pub use shape::{concat, stack_rows};
