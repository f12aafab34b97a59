//! Dense row-major tensors, a recording tape with reverse-mode
//! differentiation, SGD with momentum and a finite-difference gradient check.

mod gradcheck;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_detailed, GradCheckReport};
pub use optim::{sgd_momentum_step, OptimState};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
