//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit seed; sub-streams are
//! derived by hashing `(seed, tag, index)` so results do not depend on
//! iteration order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub type DetRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ tag) ^ index)
}

pub fn rng_from(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sub_rng(seed: u64, tag: u64, index: u64) -> DetRng {
    rng_from(derive_seed(seed, tag, index))
}

pub fn normal_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

/// `k` distinct indices from `0..n`, sorted.
pub fn sample_subset(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut picked = rand::seq::index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}

pub mod tags {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const SCENE: u64 = 5;
    pub const CORRUPT: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const SUBSET: u64 = 8;
    pub const DROPOUT: u64 = 9;
}
