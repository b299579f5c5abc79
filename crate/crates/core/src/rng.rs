//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit [`SimRng`]. Work that fans out
//! (the `R` simulations behind one synthetic-likelihood evaluation, replicate
//! batches) derives child streams from a parent seed and a stream index, so
//! the numbers drawn never depend on thread scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream ids used when a replicate seed is split into independent purposes.
pub mod purpose {
    pub const DATA: u64 = 0;
    pub const START: u64 = 1;
    pub const ALGORITHM: u64 = 2;
}

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Child stream `index` of `seed`.
pub fn stream(seed: u64, index: u64) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws a fresh parent seed for a batch of child streams.
pub fn fork_seed(rng: &mut SimRng) -> u64 {
    rng.next_u64()
}
