//! Importance-weighted token dropout for multimodal prompt tuning.

pub mod ablation;
pub mod analysis;
pub mod config;
pub mod data;
pub mod dropout;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod importance;
pub mod residual;
pub mod rng;
pub mod selftest;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
