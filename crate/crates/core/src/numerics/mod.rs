//! Tensor container, differentiable kernels and the finite-difference oracle.

pub mod gradcheck;
pub mod kernels;
pub mod param;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use param::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
