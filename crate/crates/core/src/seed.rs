//! Seed derivation.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded from a 64-bit
//! value derived as `mix(mix(master ^ tag) ^ index)`, where `mix` is the
//! SplitMix64 finalizer and `tag` is a fixed per-stage constant. Parallel
//! work over queries uses `index = query position in the dataset`, so output
//! does not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_DATA: u64 = 0x6461_7461;
pub const TAG_TEST_DATA: u64 = 0x7465_7374;
pub const TAG_ORACLE: u64 = 0x6f72_636c;
pub const TAG_POLICY: u64 = 0x706f_6c69;
pub const TAG_SESSIONS: u64 = 0x7365_7373;
pub const TAG_CTR: u64 = 0x6374_7231;
pub const TAG_RANKER: u64 = 0x7572_6e6b;
pub const TAG_BASELINE: u64 = 0x6261_7365;

pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(master: u64, tag: u64) -> u64 {
    mix(master ^ tag)
}

pub fn derive_indexed(master: u64, tag: u64, index: u64) -> u64 {
    mix(derive(master, tag) ^ index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
