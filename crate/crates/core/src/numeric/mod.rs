//! Dense array arithmetic with reverse-mode gradients, plus the optimizer,
//! finite-difference checker and checkpoint IO built on top of it.

pub mod checkpoint;
mod conv;
pub mod fd;
mod ops;
pub mod optim;
mod tensor;

pub use fd::{finite_diff_check, FdReport};
pub use optim::Adam;
pub use tensor::{Gradients, Tensor};
