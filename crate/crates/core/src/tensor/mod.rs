//! Dense N-D arrays with reverse-mode differentiation.
//!
//! [`Tensor`] carries data; a [`Tape`] records the primitive ops of one
//! forward pass and replays them backwards. `f32` is the default element type,
//! `f64` backs the tight finite-difference suites.

mod array;
mod error;
pub mod io;
pub(crate) mod kernels;
mod real;
mod tape;

pub use array::Tensor;
pub use error::{Result, TensorError};
pub use real::{DType, Real};
pub use tape::{BackwardRule, BinaryKind, ElemOp, Tape, UnaryKind, Var};

pub(crate) use tape::softplus;
