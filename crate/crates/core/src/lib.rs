//! Self-supervised contrastive training with an EMA key encoder and a
//! dual-view InfoNCE loss whose key-view negatives are the memory-bank rows
//! farthest from the anchor.
//!
//! The crate is framework-free: a small MLP encoder with analytic gradients
//! stands in for a convolutional backbone, and every piece of the pipeline
//! (augmentation, memory bank, losses, SGD, EMA key encoder, weighted KNN
//! evaluation, checkpointing) is implemented here on `f64`.

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod memory_bank;
pub mod numeric;
pub mod objective;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
