//! Small dense tensors, reverse-mode differentiation, optimizers and
//! seeded random streams.

mod gradcheck;
mod nn;
mod optim;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_batch, random_case, rel_error, GradCheckReport, GradMismatch, FD_STEP};
pub use nn::{backward, collect_grads, forward, Layer, NetParams, ParamGrads};
pub use optim::{optimizer_step, OptimizerKind, OptimizerState};
pub use rng::Rng;
pub use tape::{sigmoid, softplus, Activation, Adjoints, Tape, Var};
pub use tensor::Tensor;
