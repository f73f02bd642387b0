//! Dense linear algebra, stable nonlinearities, the seeded random stream and
//! the finite-difference gradient oracle. All arithmetic is `f64`.

mod activation;
mod gradcheck;
mod linalg;
mod rng;

pub use activation::{bounded_tanh, sigmoid, softmax, softmax_in_place};
pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error, RELATIVE_ERROR_FLOOR};
pub use linalg::{affine, axpy, dot, Matrix, Vector};
pub use rng::{Rng, RNG_ALGORITHM};
