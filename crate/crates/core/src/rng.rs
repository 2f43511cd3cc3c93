//! Seed derivation.
//!
//! Every random stream is a ChaCha8 generator seeded from
//! `derive_seed(master, stream, index)`, which folds the three values through
//! SplitMix64. `stream` names the consumer (see the constants below) and
//! `index` is a counter within it: the global step number for training noise,
//! the epoch for minibatch shuffles, the class id for synthesis. Streams never
//! share state, so adding or reordering consumers does not perturb others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT: u64 = 1;
pub const SHUFFLE: u64 = 2;
pub const PRETRAIN_STEP: u64 = 3;
pub const REGRESSOR_STEP: u64 = 4;
pub const GENERATOR_STEP: u64 = 5;
pub const SYNTHESIS: u64 = 6;
pub const SPLIT: u64 = 7;
pub const CLASSIFIER: u64 = 8;
pub const DATASET: u64 = 9;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index)
}

pub fn stream_rng(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
