//! Differentiable tensor core.

pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod precision;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, Coordinate, GradCheckConfig, GradCheckReport};
pub use precision::{precision, set_precision, with_precision, Precision};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
