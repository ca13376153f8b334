//! Benchmark-only crate; see the `benches/` targets.
//!
//! Shared input builders for the benches live here so both targets exercise
//! identical data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refsr_core::Tensor;

/// Deterministic random feature map.
pub fn feature_map(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(1, c, h, w, -1.0, 1.0, &mut rng)
}

/// Deterministic random image-range tensor.
pub fn image_map(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(1, c, h, w, 0.0, 1.0, &mut rng)
}
