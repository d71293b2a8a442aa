//! Minimal reverse-mode differentiable numerics.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, DEFAULT_FD_EPS};
pub use tape::{BatchNormState, Mode, Tape, Var, BN_EPS, BN_MOMENTUM, SQRT_EPS};
pub use tensor::{NdTensor, Scalar};
