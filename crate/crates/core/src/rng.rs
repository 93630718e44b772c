//! Seeded randomness. Every stochastic step in the engine draws from a
//! ChaCha8 stream derived from a `(seed, purpose)` pair so that distinct
//! consumers never share a stream.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type EngineRng = ChaCha8Rng;

pub fn stream(seed: u64, purpose: u64) -> EngineRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

pub fn normal(rng: &mut EngineRng, std: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    z * std
}

pub fn normal_vec(rng: &mut EngineRng, len: usize, std: f64) -> Vec<f64> {
    (0..len).map(|_| normal(rng, std)).collect()
}

/// Stream identifiers, kept in one place so they stay distinct.
pub mod purpose {
    pub const TOKEN_TABLE: u64 = 1;
    pub const TEXT_ENCODER: u64 = 2;
    pub const FUSION_ENCODER: u64 = 3;
    pub const PROMPT_INIT: u64 = 10;
    pub const PROTOTYPE_INIT: u64 = 11;
    pub const SHUFFLE: u64 = 12;
    pub const EPISODE: u64 = 20;
    pub const GMM_CENTROIDS: u64 = 30;
    pub const GMM_CLASS: u64 = 31;
    pub const GMM_NOISE: u64 = 32;
}
