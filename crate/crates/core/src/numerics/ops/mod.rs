//! Differentiable primitives, recorded as methods on [`Tape`](super::Tape).

mod conv;
mod elementwise;
pub(crate) mod linalg;
mod norm;
mod pool;
pub(crate) mod shape;

pub(crate) use elementwise::sigmoid;
pub use norm::{BatchStats, NORM_EPS};
