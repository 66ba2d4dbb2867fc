//! Raw slice kernels. Shapes are passed explicitly and assumed validated by the caller.

pub mod conv;
pub mod nn;
pub mod resample;
