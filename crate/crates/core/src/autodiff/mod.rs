//! Dense tensors and reverse-mode differentiation for the kernels used by
//! the reference networks and losses.

pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, OpKind};
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use tape::{BatchStats, BnMode, Gradients, Padding, Tape, Var, BN_EPS, BN_MOMENTUM, LOG_FLOOR, NORM_EPS};
pub use tensor::Tensor;
