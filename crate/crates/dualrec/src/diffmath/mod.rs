//! Minimal reverse-mode differentiable array engine.
//!
//! Supplies every primitive the model needs plus a finite-difference
//! gradient oracle (`grad_check`). 64-bit is used for gradient checks,
//! 32-bit for training.

mod gradcheck;
mod io;
pub mod ops;
mod tensor;

pub use gradcheck::grad_check;
pub use io::{load_tsr, save_tsr};
pub use ops::*;
pub use tensor::{grad_enabled, no_grad, Tensor};
