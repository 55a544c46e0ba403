//! Inner ensemble networks, maxout and dropout layers on a small reverse-mode
//! differentiation engine, together with closed-form variance propagation
//! results and the Monte Carlo estimators that check them.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, CLI and
//! parallel drivers live in the `ienlab` companion crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod math;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod variance;

pub use autodiff::{finite_diff_check, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
