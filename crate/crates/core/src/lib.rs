//! Session-wise generative retrieval: a masked-attention sequence model over
//! session-structured user histories, trained with contrastive and cascade
//! objectives, with inner-product top-k retrieval and hit-rate evaluation.
//!
//! Module map:
//! - [`data`]: events, sessions, token sequences, synthetic data, user buckets
//! - [`model`]: embedding composition, session mask, session-wise rotary
//!   encoding, attention blocks with optional expert routing
//! - [`loss`]: negative sampling, contrastive and cascade losses, multi-scene
//!   aggregation
//! - [`grad`]: analytic gradients plus the finite-difference oracle
//! - [`train`]: optimizers, training loop, rotating-bucket incremental
//!   schedule, checkpoints
//! - [`retrieval`]: item index, top-k search, hit-rate evaluation, nearline
//!   cache

pub mod data;
pub mod error;
pub mod grad;
pub mod loss;
pub mod model;
pub mod retrieval;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Deterministic 64-bit FNV-1a hash; stable across platforms and runs.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Derive a child seed from a base seed and a label, so every consumer of
/// randomness gets an independent, reproducible stream.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + label.len());
    bytes.extend_from_slice(&base.to_le_bytes());
    bytes.extend_from_slice(label.as_bytes());
    stable_hash(&bytes)
}
