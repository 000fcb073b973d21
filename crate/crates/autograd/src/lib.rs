//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The building blocks are deliberately small: matmul variants, row softmax,
//! GELU, cosine similarities, log-sum-exp, a two-layer MLP, single-head
//! scaled dot-product attention, and Adam. Forward math lives in [`kernels`]
//! and is shared by recorded ([`tape`]) and plain callers. [`gradcheck`]
//! provides the central finite-difference oracle used to validate every
//! backward rule.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};
