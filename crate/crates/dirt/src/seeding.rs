//! Deterministic seed derivation.
//!
//! Every source of randomness (init, shuffling, dropout masks, response
//! sampling) gets its own stream derived from the master seed and a tag
//! path, so work can be farmed out across threads without changing the
//! draws any unit sees.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed with a tag path into an independent stream seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix64(master ^ 0x6a09_e667_f3bc_c908);
    for &t in tags {
        acc = splitmix64(acc ^ splitmix64(t));
    }
    acc
}

pub fn rng_for(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}

// Stream tags. Values are arbitrary but fixed; changing them changes
// every derived stream.
pub const TAG_INIT: u64 = 1;
pub const TAG_SHUFFLE: u64 = 2;
pub const TAG_DROPOUT: u64 = 3;
pub const TAG_VAL_SPLIT: u64 = 4;
pub const TAG_SPLIT: u64 = 5;
pub const TAG_GEN_STUDENT: u64 = 6;
pub const TAG_GEN_QUESTION: u64 = 7;
pub const TAG_GEN_EMBEDDING: u64 = 8;
pub const TAG_GEN_STRUCTURE: u64 = 9;
