//! Locality-aware latent diffusion for 3D volumes: phantom data, a
//! vector-quantized codec, mask-derived conditions, guided sampling and
//! distribution metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod augment;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod condition;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod hashing;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod seeds;
pub mod topo;
pub mod volume;

pub use error::{LadError, Result};
