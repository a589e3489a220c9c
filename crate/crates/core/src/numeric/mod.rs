//! Differentiable arrays, the operation tape, and gradient checking.

mod array;
pub mod gradcheck;
mod kernels;
mod params;
mod tape;

pub use array::DiffArray;
pub use gradcheck::{check_gradient, GradCheckReport};
pub use params::{Binding, ParamSet};
pub use tape::{ConvGeom, Gradients, Tape, Var, NORM_FLOOR, PAD};

#[cfg(test)]
mod tests;
