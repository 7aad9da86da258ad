//! Dense tensors, elementwise kernels with analytic gradients, Adam with
//! non-negativity projection, and a finite-difference gradient checker.

mod adam;
mod gradcheck;
mod ops;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, Constraint, ParamTensor};
pub use gradcheck::{
    finite_diff_check, sample_coords, Coord, GradCheckReport, Objective, TensorObjective,
};
pub use ops::{
    affine, backward_affine, backward_hadamard, backward_sigmoid, hadamard, sigmoid,
    sigmoid_scalar, AffineGrads, SIGMOID_CLAMP,
};
pub use tensor::{dot, Real, Tensor2};
