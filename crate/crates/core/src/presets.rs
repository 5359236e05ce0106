//! Synthetic benchmark distributions shared by tests, the CLI and the Python bindings.

use std::f64::consts::PI;

use crate::analysis::mean_row_distance;
use crate::denoiser::{DenoiserOracle, GmmComponent, Parameterization};
use crate::error::Result;
use crate::noise::initial_noise;
use crate::schedule::{make_grid, NoiseSchedule, ScheduleKind, Spacing};
use crate::solvers::{run_sampler, SolverKind};

pub const RING_COMPONENTS: usize = 8;
pub const RING_RADIUS: f64 = 1.0;
pub const RING_STD: f64 = 0.1;

/// Eight equal-weight isotropic components on the unit circle in 2D.
pub fn gmm_ring(parameterization: Parameterization) -> DenoiserOracle {
    gmm_ring_with(parameterization, RING_COMPONENTS, RING_RADIUS, RING_STD)
}

pub fn gmm_ring_with(parameterization: Parameterization, k: usize, radius: f64, std: f64) -> DenoiserOracle {
    let components = (0..k)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / k as f64;
            GmmComponent {
                weight: 1.0,
                mean: vec![radius * a.cos(), radius * a.sin()],
                std,
            }
        })
        .collect();
    DenoiserOracle::gmm(parameterization, components).expect("valid ring mixture")
}

pub const GAUSSIAN_MEAN: f64 = 0.5;
pub const GAUSSIAN_STD: f64 = 0.5;

/// One-dimensional Gaussian data used as the convergence benchmark.
pub fn gaussian_1d(parameterization: Parameterization) -> DenoiserOracle {
    DenoiserOracle::gaussian(parameterization, vec![GAUSSIAN_MEAN], GAUSSIAN_STD).expect("valid gaussian")
}

/// Schedule and grid spacing a solver is benchmarked on: VP with equal log-SNR steps, or VE with Karras steps.
pub fn benchmark_setting(kind: SolverKind) -> (NoiseSchedule, Spacing) {
    match kind.required_schedule() {
        ScheduleKind::VpLinear => (NoiseSchedule::vp_linear(), Spacing::UniformLogSnr),
        ScheduleKind::VeKarras => (NoiseSchedule::ve_karras(), Spacing::KarrasRho),
    }
}

/// Mean endpoint distance to the exact Gaussian flow for each step count.
pub fn gaussian_endpoint_errors(
    kind: SolverKind,
    schedule: &NoiseSchedule,
    spacing: Spacing,
    steps: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let oracle = gaussian_1d(kind.parameterization());
    let x = initial_noise(schedule, n_samples, 1, seed);
    let exact = oracle.exact_flow_map(x.view(), schedule.t_max(), schedule.t_min(), schedule)?;
    steps
        .iter()
        .map(|&n| {
            let grid = make_grid(schedule, n, spacing)?;
            let tr = run_sampler(kind, &oracle, schedule, &grid, x.clone(), false)?;
            Ok((n, mean_row_distance(tr.final_state().view(), exact.view())?))
        })
        .collect()
}
