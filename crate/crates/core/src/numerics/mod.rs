//! Dense linear algebra, activations, seeded randomness and the
//! finite-difference gradient oracle.

mod gemm;
mod matrix;
mod ops;
pub(crate) mod params;
mod rng;

pub use matrix::{matmul, Matrix};
pub use ops::{
    finite_diff_grad, leaky_relu, leaky_relu_grad, masked_softmax_row, max_relative_error, relu, relu_grad,
    softmax_row, DEFAULT_LEAKY_SLOPE,
};
pub use params::ParamSet;
pub use rng::SeededRng;
