//! Seeded random streams.
//!
//! Every stochastic step in the crate takes an explicit [`Rng`], so a run is
//! fully determined by its seed.

use rand::SeedableRng;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream for item `index` of a run seeded with `seed`.
pub fn stream(seed: u64, index: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
