//! Post-training quantization for bidirectional selective-scan vision blocks.
//!
//! The crate is `no_std` (it needs `alloc`). File IO, JSON and the command
//! line live in the companion `vimq` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod kscaled;
pub mod metrics;
pub mod model;
pub mod quantizer;
pub mod reparam;
pub mod ssm;
pub mod synth;
pub mod tensor;

pub use quantizer::{QuantError, QuantParams, SimilarityMetric};
pub use model::{QuantConfig, VimBlock};
pub use tensor::{Tensor, TensorError};
