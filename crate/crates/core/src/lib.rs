//! Diffusion probability-flow ODE samplers and their distilled single-parameter variants.
//!
//! The crate is organized bottom-up:
//!
//! * [`schedule`]: noise schedules, log-SNR and time grids.
//! * [`denoiser`]: exact posterior-mean denoisers for Gaussian, mixture and point-cloud data.
//! * [`solvers`]: DDIM, iPNDM, DPM-Solver 1/2/3, tAB-DEIS and EDM Heun.
//! * [`dode`]: the `O_t = d_t + lambda_t (d_t - d_prev)` recombination wrapped around every solver.
//! * [`distill`]: teacher/student fitting of the per-step `lambda_t` by closed-form least squares.
//! * [`analysis`]: trajectory diagnostics and sample-quality metrics.
//! * [`io`]: CSV, JSON and binary artifacts.

pub mod analysis;
pub mod denoiser;
pub mod distill;
pub mod dode;
pub mod error;
pub mod io;
pub mod noise;
pub mod presets;
pub mod schedule;
pub mod solvers;

pub use denoiser::{DenoiserOracle, DenoisingOutput, GmmComponent, Parameterization};
pub use distill::{distill, DistillConfig, DistillReport};
pub use dode::{DOdeFormulation, LambdaMode, LambdaSchedule};
pub use error::{DodeError, Result};
pub use schedule::{make_grid, NoiseSchedule, Spacing, TimeGrid};
pub use solvers::{run_sampler, SolverKind, SolverState, Trajectory};

/// A batch of samples, one per row.
pub type Batch = ndarray::Array2<f64>;
