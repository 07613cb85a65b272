//! Normalizing-flow density estimation with multi-scale block couplings and a
//! topic-structured Gaussian-mixture latent prior.

// Range checks are written as `!(x > 0.0)` so that NaN is rejected too, and
// the tape's arithmetic methods return `Result` rather than implementing the
// operator traits.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod prior;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Gradients, Padding, Real, Tape, Tensor, Var};
