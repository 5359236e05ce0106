//! Exponential-integrator coefficients for tAB-DEIS.
//!
//! For a step `t -> t_prev` with history nodes `t_0 = t, t_1, ..., t_r` the update is
//! `x_prev = (alpha_prev / alpha_t) x_t + sum_j C_j d_j` where
//!
//! ```text
//! C_j = int_{t_prev}^{t} [alpha'(s) sigma_s / alpha_s - sigma'(s)] (alpha_prev / alpha_s) l_j(s) ds
//! ```
//!
//! and `l_j` is the Lagrange basis over the nodes. The weight equals `-alpha_prev d(sigma/alpha)/ds`,
//! so with `rho = sigma / alpha` the integral becomes `-alpha_prev int l_j(t(rho)) d rho`. The
//! composite trapezoid rule is applied in `rho`, where the weight is constant and the `r = 0`
//! coefficient is reproduced to rounding.

use crate::error::{DodeError, Result};
use crate::schedule::NoiseSchedule;

pub const DEFAULT_QUADRATURE_NODES: usize = 256;

fn lagrange_basis(nodes: &[f64], j: usize, s: f64) -> f64 {
    nodes
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != j)
        .map(|(_, &tk)| (s - tk) / (nodes[j] - tk))
        .product()
}

/// Coefficients `C_j` for history nodes `nodes[0] = t` (most recent first).
pub fn deis_coefficients(
    schedule: &NoiseSchedule,
    t: f64,
    t_prev: f64,
    nodes: &[f64],
    n_sub: usize,
) -> Result<Vec<f64>> {
    if nodes.is_empty() || n_sub == 0 {
        return Err(DodeError::Config("deis needs at least one node and one sub-interval".into()));
    }
    for (i, a) in nodes.iter().enumerate() {
        if nodes[..i].contains(a) {
            return Err(DodeError::DegenerateLagrange(*a));
        }
    }
    let (a_t, s_t) = schedule.alpha_sigma(t)?;
    let (a_p, s_p) = schedule.alpha_sigma(t_prev)?;
    let (rho_t, rho_p) = (s_t / a_t, s_p / a_p);
    if nodes.len() == 1 {
        return Ok(vec![-a_p * (rho_t - rho_p)]);
    }
    let width = (rho_t - rho_p) / n_sub as f64;
    let mut times = Vec::with_capacity(n_sub + 1);
    times.push(t_prev);
    for k in 1..n_sub {
        let rho = rho_p + k as f64 * width;
        times.push(schedule.inv_log_snr(-rho.ln())?);
    }
    times.push(t);
    Ok((0..nodes.len())
        .map(|j| {
            let f: Vec<f64> = times.iter().map(|&s| lagrange_basis(nodes, j, s)).collect();
            let inner: f64 = f[1..n_sub].iter().sum();
            -a_p * width * (0.5 * (f[0] + f[n_sub]) + inner)
        })
        .collect())
}
