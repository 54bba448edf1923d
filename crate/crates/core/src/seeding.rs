//! Deterministic RNG stream splitting.
//!
//! Every stochastic draw in a run comes from a stream keyed by the run seed
//! and a short tag path (stage, iteration, case, rollout), so results do not
//! depend on how episodes are scheduled across threads.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, tags))
}

// Stream tags.
pub const TAG_TASKS: u64 = 1;
pub const TAG_CASE: u64 = 2;
pub const TAG_SPLIT: u64 = 3;
pub const TAG_SFT: u64 = 4;
pub const TAG_GRPO: u64 = 5;
pub const TAG_EVAL: u64 = 6;
pub const TAG_DEMO: u64 = 7;
pub const TAG_ORDER: u64 = 8;
