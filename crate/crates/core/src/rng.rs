//! Counter-derived RNG substreams.
//!
//! Every independent unit of Monte Carlo work (a trajectory, an identification
//! run, a reference replicate) draws from its own ChaCha8 stream keyed by
//! `(master seed, domain, index)`. Results therefore do not depend on how work
//! is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Distinct domains never share a stream for the same index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Ensemble = 1,
    Identify = 2,
    Reference = 3,
    Decomposition = 4,
    Particle = 5,
    Prior = 6,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed value of the substream `(master, domain, index)`.
pub fn substream_seed(master: u64, domain: Domain, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(domain as u64)) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// RNG for substream `(master, domain, index)`.
pub fn substream(master: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(master, domain, index))
}

/// RNG seeded directly from a recorded substream seed.
pub fn from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
