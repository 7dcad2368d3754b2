//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sieve_core::clustering::DistanceMatrix;
use sieve_core::synth::{generate_world, SyntheticWorld, SyntheticWorldSpec};

pub fn activation_column(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            if rng.random_bool(0.02) {
                rng.random_range(1.0..10.0)
            } else {
                0.0
            }
        })
        .collect()
}

pub fn point_cloud(n: usize, dim: usize, seed: u64) -> DistanceMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    DistanceMatrix::from_points(&points)
}

/// The acceptance-sized world: 64 planted and 16 distractor neurons over 40
/// concepts in 64 dimensions.
pub fn acceptance_world(seed: u64) -> SyntheticWorld {
    generate_world(&SyntheticWorldSpec::new(40, 64, 64, 16, 20, seed)).expect("valid spec")
}
