//! Shared fixtures for the benchmarks.

use matsae_core::sae::{self, SaeConfig, SaeParams, SparseCode};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn gaussian_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Randomly initialized SAE with a zero pre-bias.
pub fn model(d: usize, dict_sizes: Vec<usize>, k_values: Vec<usize>, seed: u64) -> (SaeConfig, SaeParams) {
    let cfg = SaeConfig::new(d, dict_sizes, k_values).expect("valid benchmark config");
    let params = sae::init_params(&cfg, seed, &vec![0.0; d]).expect("init");
    (cfg, params)
}

/// Sparse codes with `active` random positive entries out of `width`.
pub fn random_codes(n: usize, width: usize, active: usize, seed: u64) -> Vec<SparseCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut idx: Vec<usize> = (0..active).map(|_| rng.random_range(0..width)).collect();
            idx.sort_unstable();
            idx.dedup();
            SparseCode {
                level: 1,
                entries: idx.into_iter().map(|j| (j, rng.random_range(0.1..2.0))).collect(),
            }
        })
        .collect()
}
