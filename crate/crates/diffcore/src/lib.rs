//! Reverse-mode differentiation over dense double-precision tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a single-element result walks the tape backwards and
//! returns [`Gradients`] for every tracked leaf; parameter gradients can then
//! be accumulated into a [`ParamStore`], where they add up across passes until
//! [`ParamStore::zero_grad`] is called.
//!
//! ```
//! use diffcore::{ParamStore, Tape, Tensor};
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
//! let tape = Tape::new();
//! let loss = tape.param(&store, w).square().sum();
//! tape.backward(loss).unwrap().accumulate_into(&mut store);
//! assert_eq!(store.grad(w).data(), &[2.0, -4.0]);
//! ```

mod error;
mod gemm;
pub mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{softmax_rows, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    tape::sigmoid(x)
}
