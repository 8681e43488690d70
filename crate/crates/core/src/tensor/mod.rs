//! Dense tensors, the autodiff tape and the finite-difference oracle.

mod dense;
pub mod gradcheck;
mod tape;

pub use dense::{kernels, Tensor};
pub use gradcheck::{finite_diff_check, FdConfig, FdReport};
pub use tape::{Gradients, OpKind, Tape, Var, FAULT_FACTOR};
