//! Deterministic random streams.
//!
//! Every random stream in the pipeline is a `ChaCha8Rng` seeded from the
//! master seed by [`derive_seed`]: the master seed, a stream domain and an
//! index are mixed with SplitMix64, so chain `c` of a fit uses
//! `derive_seed(seed, CHAINS, c)`, LOAO fold `k` uses
//! `derive_seed(seed, FOLDS, k)`, and so on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CHAINS: u64 = 1;
pub const FOLDS: u64 = 2;
pub const FILTER: u64 = 3;
pub const SIMULATION: u64 = 4;
pub const REPLICATES: u64 = 5;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_seed(master: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(domain)).wrapping_add(index))
}

pub fn stream(master: u64, domain: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, domain, index))
}
