//! Dense `f32` tensors with a tape-based reverse-mode autodiff, 3D
//! convolution, group normalization and an Adam optimizer.
//!
//! Everything runs single-threaded with a fixed evaluation order, so a given
//! sequence of operations is bitwise reproducible. That property is what the
//! training code relies on for exact checkpoint resume.

#![allow(clippy::needless_range_loop)]

pub mod conv;
mod error;
mod graph;
pub mod nn;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Grads, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{write_atomic, ParamId, ParamStore};
pub use tensor::{conv_out_len, Tensor};
