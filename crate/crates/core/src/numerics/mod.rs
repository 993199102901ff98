//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! Values live in [`Tensor`]s; a [`Tape`] records each primitive applied to
//! them and replays the chain rule backwards. Trainable state lives in a
//! [`ParamStore`] and enters a tape through [`Tape::param`].

mod gradcheck;
pub mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_inputs, relative_error, GradCheckReport, GradEntry};
pub use ops::{BatchStats, NORM_EPS};
pub use params::{init, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{Backward, GradSink};
