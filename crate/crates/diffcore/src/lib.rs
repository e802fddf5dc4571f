//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! Build a [`Tape`] per forward pass, register trainable tensors with
//! [`Tape::param`], compose operations, then call [`Tape::backward`] on the
//! scalar loss and read gradients back with [`Tape::grad`].
//!
//! ```
//! use diffcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let theta = tape.param(Tensor::scalar(3.0));
//! let sq = tape.mul(theta, theta).unwrap();
//! tape.backward(sq).unwrap();
//! assert_eq!(tape.grad(theta).unwrap().item(), 6.0);
//! ```

mod error;
mod gradcheck;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{compare_with_finite_differences, grad_check, value_and_grad};
pub use tape::{sigmoid, AttentionOut, Tape, Var, MASK_FILL, NORM_EPS};
pub use tensor::Tensor;
