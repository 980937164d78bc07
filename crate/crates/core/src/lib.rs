// Guards written as `!(x > 0.0)` also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod diffusion;
pub mod envs;
pub mod error;
pub mod metrics;
pub mod nets;
pub mod policy;
pub mod rl;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};

#[cfg(test)]
mod properties;
