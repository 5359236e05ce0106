use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::schedule::NoiseSchedule;

/// Seeded generator used for every random draw in the crate.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard deviation of the prior at `t_max`: 1 for VP, `sigma_max` for VE.
pub fn prior_std(schedule: &NoiseSchedule) -> f64 {
    match *schedule {
        NoiseSchedule::VpLinear { .. } => 1.0,
        NoiseSchedule::VeKarras { sigma_max, .. } => sigma_max,
    }
}

/// Initial sample `x_T` drawn from the isotropic prior, row by row.
pub fn initial_noise(schedule: &NoiseSchedule, n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    let scale = prior_std(schedule);
    Array2::from_shape_fn((n, dim), |_| {
        let z: f64 = StandardNormal.sample(&mut r);
        scale * z
    })
}

/// Seeds for batches that were not used for fitting.
pub fn held_out_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64)
        .map(|i| (base ^ 0x9E37_79B9_7F4A_7C15).wrapping_add(i + 1))
        .collect()
}
