//! Minimal reverse-mode differentiation: tensors, parameters, a recording
//! tape with the primitives the graph layers need, and a finite-difference
//! checker.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckOptions, GradCheckReport, ParamError};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{shifted_softplus, sigmoid, BatchNorm, Mode, RunningStatUpdate, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
