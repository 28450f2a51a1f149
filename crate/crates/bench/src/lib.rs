//! Seeded inputs shared by the benchmarks.

use ognet::geometry::PointCloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform cloud in the unit cube with random colors.
pub fn random_cloud(m: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos = (0..m).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    let col = (0..m).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();
    PointCloud::new(pos, col).expect("valid random cloud")
}
