//! Density-matrix simulation, global-state training and privacy auditing for
//! variational quantum classifiers.
//!
//! A batch of same-label states is replaced by its uniform mixture (the
//! *global state*); because unitary evolution and expectation values are
//! linear, a classifier trained on global states sees the same averaged
//! predictions as one trained on the individual states.

pub mod ansatz;
pub mod batching;
pub mod classifier;
pub mod datagen;
pub mod error;
pub mod optim;
pub mod privacy;
pub mod protocol;
pub mod qcore;

pub use error::{Error, Result};

use rand::SeedableRng;

/// Seeded generator used throughout the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// Derives an independent stream for `(seed, stream)` without sharing generator state.
pub fn derived_rng(seed: u64, stream: u64) -> SeededRng {
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
