//! Seeded randomness. Every stochastic component takes a `u64` seed and derives
//! its own ChaCha stream, so runs are reproducible and streams don't collide.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// RNG for a top-level seed.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent substream: same `seed` with different `salt` values gives
/// decorrelated streams (splitmix finalizer over the pair).
pub fn substream(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

pub fn normal1(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Array1<f64> {
    Array1::from_iter((0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)))
}

pub fn normal2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data length")
}
