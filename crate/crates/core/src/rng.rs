//! Deterministic random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream, addressed by a
//! master seed, a purpose and an index (usually the agent). Streams never
//! share state, so turning one source of noise off leaves every other draw
//! unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    Perturbation = 2,
    EvalSet = 3,
    Topology = 4,
    Validation = 5,
}

pub fn stream(master_seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(((purpose as u64) << 32) | (index & 0xffff_ffff));
    rng
}

/// One stream per agent for the given purpose.
pub fn agent_streams(master_seed: u64, purpose: Purpose, agents: usize) -> Vec<StreamRng> {
    (0..agents as u64)
        .map(|k| stream(master_seed, purpose, k))
        .collect()
}

/// Master seed of replica `replica` within an experiment seeded by `seed`.
pub fn replica_seed(seed: u64, replica: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ replica.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
