//! Seeded random streams. Every consumer gets its own ChaCha stream so that
//! adding draws in one place never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_MDP: u64 = 1;
pub const STREAM_POLICY: u64 = 2;
pub const STREAM_TRAJECTORY: u64 = 3;
pub const STREAM_FEATURES: u64 = 4;
pub const STREAM_SCHEDULE: u64 = 5;
pub const STREAM_DELAY: u64 = 6;
/// Selector streams are `STREAM_SELECTOR_BASE + node`.
pub const STREAM_SELECTOR_BASE: u64 = 1 << 32;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Selector stream for node `node`; shared with the centralized SAG baseline.
pub fn selector_stream(seed: u64, node: usize) -> ChaCha8Rng {
    stream(seed, STREAM_SELECTOR_BASE + node as u64)
}
