//! Seeded, counter-based random streams.
//!
//! Every consumer derives its generator from `(seed, stream)` so independent
//! pieces of a run (subsampling, noise, directions, initialization) never
//! share state and replay bit-identically on any platform.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Stream identifiers for the different random consumers of a run.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DIRECTIONS: u64 = 2;
    pub const SUBSAMPLE: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const AUDIT: u64 = 5;
    pub const DATA: u64 = 6;
    pub const PROBE: u64 = 7;
    pub const GENERATION: u64 = 8;
}

pub fn stream(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator for step `step` of a per-step stream family.
///
/// The low 32 bits of the stream id hold the family, the high bits the step.
pub fn step_stream(seed: u64, family: u64, step: u64) -> ChaCha20Rng {
    stream(seed, (step << 32) | (family & 0xffff_ffff))
}
