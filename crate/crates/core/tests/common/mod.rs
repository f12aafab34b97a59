#![allow(dead_code)]

pub mod oracle;

use composeae::composition::HiddenSizes;
use composeae::{ModelConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        d: 4,
        h: 3,
        k: 2,
        hidden: HiddenSizes { gamma: 5, eta: 5, rho: 5, decoder: 5, rho_conv_fc: 6, baseline: 5 },
        conv_filters: 2,
        conv_len: 3,
        conv_kernel: 3,
        variant,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect()
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}
