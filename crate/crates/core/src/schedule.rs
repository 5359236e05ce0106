//! Noise schedules `(alpha_t, sigma_t)`, the log-SNR map and discrete time grids.
//!
//! Two schedule families are supported:
//!
//! * `VpLinear`: variance preserving with a linear `beta(t)`, time in `[t_epsilon, 1]`,
//!   `alpha_t = exp(-t^2 (beta_max - beta_min) / 4 - t beta_min / 2)` and
//!   `sigma_t = sqrt(1 - alpha_t^2)`.
//! * `VeKarras`: variance exploding with `alpha_t = 1`, `sigma_t = t`, time in
//!   `[sigma_min, sigma_max]`.

use serde::{Deserialize, Serialize};

use crate::error::{DodeError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseSchedule {
    VpLinear {
        #[serde(default = "defaults::beta_min")]
        beta_min: f64,
        #[serde(default = "defaults::beta_max")]
        beta_max: f64,
        #[serde(default = "defaults::t_epsilon")]
        t_epsilon: f64,
    },
    VeKarras {
        #[serde(default = "defaults::sigma_min")]
        sigma_min: f64,
        #[serde(default = "defaults::sigma_max")]
        sigma_max: f64,
        #[serde(default = "defaults::rho")]
        rho: f64,
    },
}

mod defaults {
    pub fn beta_min() -> f64 {
        0.1
    }
    pub fn beta_max() -> f64 {
        20.0
    }
    pub fn t_epsilon() -> f64 {
        1e-3
    }
    pub fn sigma_min() -> f64 {
        0.002
    }
    pub fn sigma_max() -> f64 {
        80.0
    }
    pub fn rho() -> f64 {
        7.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    VpLinear,
    VeKarras,
}

impl NoiseSchedule {
    pub fn vp_linear() -> Self {
        NoiseSchedule::VpLinear {
            beta_min: defaults::beta_min(),
            beta_max: defaults::beta_max(),
            t_epsilon: defaults::t_epsilon(),
        }
    }

    pub fn ve_karras() -> Self {
        NoiseSchedule::VeKarras {
            sigma_min: defaults::sigma_min(),
            sigma_max: defaults::sigma_max(),
            rho: defaults::rho(),
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        match self {
            NoiseSchedule::VpLinear { .. } => ScheduleKind::VpLinear,
            NoiseSchedule::VeKarras { .. } => ScheduleKind::VeKarras,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseSchedule::VpLinear {
                beta_min,
                beta_max,
                t_epsilon,
            } => beta_min > 0.0 && beta_max > beta_min && t_epsilon > 0.0 && t_epsilon < 1.0,
            NoiseSchedule::VeKarras {
                sigma_min,
                sigma_max,
                rho,
            } => sigma_min > 0.0 && sigma_max > sigma_min && rho > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(DodeError::Config(format!("invalid schedule parameters: {self:?}")))
        }
    }

    /// Lower end of the integration domain.
    pub fn t_min(&self) -> f64 {
        match *self {
            NoiseSchedule::VpLinear { t_epsilon, .. } => t_epsilon,
            NoiseSchedule::VeKarras { sigma_min, .. } => sigma_min,
        }
    }

    pub fn t_max(&self) -> f64 {
        match *self {
            NoiseSchedule::VpLinear { .. } => 1.0,
            NoiseSchedule::VeKarras { sigma_max, .. } => sigma_max,
        }
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        if t.is_finite() && t >= self.t_min() && t <= self.t_max() {
            Ok(())
        } else {
            Err(DodeError::Domain(format!(
                "t = {t} outside [{}, {}]",
                self.t_min(),
                self.t_max()
            )))
        }
    }

    /// `log alpha_t` without a domain check.
    fn log_alpha(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::VpLinear {
                beta_min, beta_max, ..
            } => -0.25 * t * t * (beta_max - beta_min) - 0.5 * t * beta_min,
            NoiseSchedule::VeKarras { .. } => 0.0,
        }
    }

    pub(crate) fn alpha_sigma_unchecked(&self, t: f64) -> (f64, f64) {
        match self {
            NoiseSchedule::VpLinear { .. } => {
                let la = self.log_alpha(t);
                (la.exp(), (-(2.0 * la).exp_m1()).sqrt())
            }
            NoiseSchedule::VeKarras { .. } => (1.0, t),
        }
    }

    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        self.check_domain(t)?;
        Ok(self.alpha_sigma_unchecked(t))
    }

    pub(crate) fn log_snr_unchecked(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::VpLinear { .. } => {
                let la = self.log_alpha(t);
                la - 0.5 * (-(2.0 * la).exp_m1()).ln()
            }
            NoiseSchedule::VeKarras { .. } => -t.ln(),
        }
    }

    /// `tau = log(alpha_t / sigma_t)`.
    pub fn log_snr(&self, t: f64) -> Result<f64> {
        self.check_domain(t)?;
        Ok(self.log_snr_unchecked(t))
    }

    /// Inverse of [`log_snr`](Self::log_snr) by bisection over the schedule domain.
    ///
    /// Bisection runs until the bracket cannot be halved any further in f64, which is
    /// far below the 1e-10 absolute tolerance in `t` that callers rely on.
    pub fn inv_log_snr(&self, tau: f64) -> Result<f64> {
        let (mut lo, mut hi) = (self.t_min(), self.t_max());
        let tau_hi = self.log_snr_unchecked(lo);
        let tau_lo = self.log_snr_unchecked(hi);
        if !(tau >= tau_lo && tau <= tau_hi) {
            return Err(DodeError::Domain(format!(
                "log-SNR {tau} outside attainable range [{tau_lo}, {tau_hi}]"
            )));
        }
        if tau == tau_hi {
            return Ok(lo);
        }
        if tau == tau_lo {
            return Ok(hi);
        }
        for _ in 0..2000 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.log_snr_unchecked(mid) > tau {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (dl, dh) = (
            (self.log_snr_unchecked(lo) - tau).abs(),
            (self.log_snr_unchecked(hi) - tau).abs(),
        );
        Ok(if dl <= dh { lo } else { hi })
    }

    /// Time whose log-SNR sits at `frac` of the way from `tau(t)` to `tau(t_prev)`.
    ///
    /// Shared by the multi-stage solvers and by teacher-grid refinement so that
    /// stage times and teacher times agree bit for bit.
    pub fn log_snr_fraction_time(&self, t: f64, t_prev: f64, frac: f64) -> Result<f64> {
        if frac == 0.0 {
            return Ok(t);
        }
        if frac == 1.0 {
            return Ok(t_prev);
        }
        let tau_t = self.log_snr(t)?;
        let tau_p = self.log_snr(t_prev)?;
        self.inv_log_snr(tau_t + frac * (tau_p - tau_t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spacing {
    UniformT,
    KarrasRho,
    /// Equal steps in log-SNR.
    UniformLogSnr,
    /// Produced by refinement or loaded from elsewhere; not generated by [`make_grid`].
    Custom,
}

/// Strictly decreasing sequence of timesteps `t_N > ... > t_0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
    spacing: Spacing,
}

impl TimeGrid {
    pub fn from_points(points: Vec<f64>, spacing: Spacing) -> Result<Self> {
        if points.len() < 2 {
            return Err(DodeError::Config("time grid needs at least 2 points".into()));
        }
        if points.iter().any(|t| !t.is_finite()) || points.windows(2).any(|w| w[1] >= w[0]) {
            return Err(DodeError::Config("time grid must be strictly decreasing".into()));
        }
        Ok(TimeGrid { points, spacing })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn n_steps(&self) -> usize {
        self.points.len() - 1
    }

    /// `(t, t_prev)` pairs in sampling order.
    pub fn intervals(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.points.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn check_within(&self, schedule: &NoiseSchedule) -> Result<()> {
        let (first, last) = (self.points[0], *self.points.last().unwrap());
        if first > schedule.t_max() || last < schedule.t_min() {
            return Err(DodeError::Config(format!(
                "grid [{last}, {first}] exceeds schedule domain [{}, {}]",
                schedule.t_min(),
                schedule.t_max()
            )));
        }
        Ok(())
    }

    /// Splits every interval into `factor` pieces of equal log-SNR width.
    pub fn refine_log_snr(&self, schedule: &NoiseSchedule, factor: usize) -> Result<TimeGrid> {
        if factor == 0 {
            return Err(DodeError::Config("refinement factor must be positive".into()));
        }
        let mut points = Vec::with_capacity(self.n_steps() * factor + 1);
        for (t, t_prev) in self.intervals() {
            points.push(t);
            for j in 1..factor {
                let frac = j as f64 / factor as f64;
                points.push(schedule.log_snr_fraction_time(t, t_prev, frac)?);
            }
        }
        points.push(*self.points.last().unwrap());
        TimeGrid::from_points(points, Spacing::Custom)
    }

    /// Index of the grid point equal to `t` within `tol`.
    pub fn position(&self, t: f64, tol: f64) -> Option<usize> {
        self.points.iter().position(|&p| (p - t).abs() <= tol)
    }
}

/// Builds an `n_steps`-interval grid from `t_max` down to `t_min`.
pub fn make_grid(schedule: &NoiseSchedule, n_steps: usize, spacing: Spacing) -> Result<TimeGrid> {
    if n_steps == 0 {
        return Err(DodeError::Config("n_steps must be at least 1".into()));
    }
    let (t_lo, t_hi) = (schedule.t_min(), schedule.t_max());
    let n = n_steps as f64;
    let mut points: Vec<f64> = match spacing {
        Spacing::UniformT => (0..=n_steps)
            .map(|i| t_hi - (i as f64 / n) * (t_hi - t_lo))
            .collect(),
        Spacing::KarrasRho => {
            let NoiseSchedule::VeKarras {
                sigma_min,
                sigma_max,
                rho,
            } = *schedule
            else {
                return Err(DodeError::Config(
                    "karras-rho spacing requires a ve-karras schedule".into(),
                ));
            };
            let (a, b) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
            (0..=n_steps)
                .map(|i| (a + (i as f64 / n) * (b - a)).powf(rho))
                .collect()
        }
        Spacing::UniformLogSnr => {
            let (a, b) = (schedule.log_snr(t_hi)?, schedule.log_snr(t_lo)?);
            (0..=n_steps)
                .map(|i| match i {
                    0 => Ok(t_hi),
                    i if i == n_steps => Ok(t_lo),
                    i => schedule.inv_log_snr(a + (i as f64 / n) * (b - a)),
                })
                .collect::<Result<_>>()?
        }
        Spacing::Custom => {
            return Err(DodeError::Config("custom spacing cannot be generated".into()));
        }
    };
    points[0] = t_hi;
    points[n_steps] = t_lo;
    TimeGrid::from_points(points, spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ve_identity() {
        let s = NoiseSchedule::ve_karras();
        assert_eq!(s.alpha_sigma(0.5).unwrap(), (1.0, 0.5));
        assert_eq!(s.log_snr(1.0).unwrap(), 0.0);
    }

    #[test]
    fn vp_near_zero_noise_limit() {
        let s = NoiseSchedule::vp_linear();
        let (a, sig) = s.alpha_sigma(1e-3).unwrap();
        assert!((a - 1.0).abs() < 1e-2);
        // sigma(1e-3) = sqrt(1 - exp(-2 * 5.4975e-5)) by hand.
        let expected = (1.0 - (-2.0 * 5.4975e-5f64).exp()).sqrt();
        assert!((sig - expected).abs() < 1e-9, "{sig} vs {expected}");
        assert!(sig < 0.011);
    }

    #[test]
    fn vp_unit_norm_at_t1() {
        let s = NoiseSchedule::vp_linear();
        let (a, sig) = s.alpha_sigma(1.0).unwrap();
        let log_a: f64 = -0.25 * 19.9 - 0.05;
        assert!((a - log_a.exp()).abs() < 1e-15);
        assert!((a * a + sig * sig - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_domain() {
        let s = NoiseSchedule::vp_linear();
        assert!(matches!(s.alpha_sigma(1.5), Err(DodeError::Domain(_))));
        assert!(matches!(s.alpha_sigma(0.0), Err(DodeError::Domain(_))));
        assert!(matches!(s.inv_log_snr(100.0), Err(DodeError::Domain(_))));
        let ve = NoiseSchedule::ve_karras();
        assert!(matches!(ve.log_snr(100.0), Err(DodeError::Domain(_))));
    }

    #[test]
    fn log_snr_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for s in [NoiseSchedule::vp_linear(), NoiseSchedule::ve_karras()] {
            for _ in 0..100 {
                let t = rng.random_range(s.t_min()..s.t_max());
                let back = s.inv_log_snr(s.log_snr(t).unwrap()).unwrap();
                assert!((back - t).abs() < 1e-9 * t.max(1.0), "{t} -> {back}");
            }
        }
    }

    #[test]
    fn vp_invariants_on_dense_grid() {
        let s = NoiseSchedule::vp_linear();
        let g = make_grid(&s, 999, Spacing::UniformT).unwrap();
        let mut prev_tau = f64::INFINITY;
        let mut prev_snr = f64::INFINITY;
        for &t in g.points().iter().rev() {
            let (a, sig) = s.alpha_sigma(t).unwrap();
            assert!(a > 0.0 && a <= 1.0 && sig >= 0.0);
            assert!((a * a + sig * sig - 1.0).abs() < 1e-12);
            let tau = s.log_snr(t).unwrap();
            let snr = a * a / (sig * sig);
            // walking forward in time
            assert!(tau < prev_tau && snr < prev_snr);
            prev_tau = tau;
            prev_snr = snr;
        }
    }

    #[test]
    fn uniform_grid() {
        let s = NoiseSchedule::vp_linear();
        let g = make_grid(&s, 4, Spacing::UniformT).unwrap();
        assert_eq!(g.points().len(), 5);
        let h = (1.0 - 1e-3) / 4.0;
        for (i, &t) in g.points().iter().enumerate() {
            assert!((t - (1.0 - i as f64 * h)).abs() < 1e-15);
        }
        let one = make_grid(&s, 1, Spacing::UniformT).unwrap();
        assert_eq!(one.points(), &[1.0, 1e-3]);
    }

    #[test]
    fn karras_grid() {
        let s = NoiseSchedule::ve_karras();
        let g = make_grid(&s, 18, Spacing::KarrasRho).unwrap();
        assert_eq!(g.points()[0], 80.0);
        assert_eq!(*g.points().last().unwrap(), 0.002);
        assert!(matches!(
            make_grid(&NoiseSchedule::vp_linear(), 4, Spacing::KarrasRho),
            Err(DodeError::Config(_))
        ));
        assert!(make_grid(&s, 0, Spacing::KarrasRho).is_err());
    }

    #[test]
    fn refinement_nests() {
        for (s, sp) in [
            (NoiseSchedule::vp_linear(), Spacing::UniformT),
            (NoiseSchedule::ve_karras(), Spacing::KarrasRho),
            (NoiseSchedule::vp_linear(), Spacing::UniformLogSnr),
            (NoiseSchedule::ve_karras(), Spacing::UniformLogSnr),
        ] {
            for n in [1, 3, 7, 10] {
                for c in [2, 5, 10, 30] {
                    let coarse = make_grid(&s, n, sp).unwrap();
                    let fine = make_grid(&s, n * c, sp).unwrap();
                    for (i, &t) in coarse.points().iter().enumerate() {
                        assert!((fine.points()[i * c] - t).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn log_snr_grid_has_equal_steps() {
        let s = NoiseSchedule::vp_linear();
        let g = make_grid(&s, 12, Spacing::UniformLogSnr).unwrap();
        let taus: Vec<f64> = g.points().iter().map(|&t| s.log_snr(t).unwrap()).collect();
        let h = (taus[12] - taus[0]) / 12.0;
        for w in taus.windows(2) {
            assert!((w[1] - w[0] - h).abs() < 1e-9);
        }
    }

    #[test]
    fn log_snr_refinement_contains_fractions() {
        let s = NoiseSchedule::vp_linear();
        let coarse = make_grid(&s, 5, Spacing::UniformT).unwrap();
        let fine = coarse.refine_log_snr(&s, 6).unwrap();
        assert_eq!(fine.n_steps(), 30);
        for (i, (t, tp)) in coarse.intervals().enumerate() {
            let mid = s.log_snr_fraction_time(t, tp, 0.5).unwrap();
            let third = s.log_snr_fraction_time(t, tp, 1.0 / 3.0).unwrap();
            assert_eq!(fine.points()[6 * i + 3], mid);
            assert_eq!(fine.points()[6 * i + 2], third);
            assert_eq!(fine.points()[6 * i], t);
        }
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::from_points(vec![1.0], Spacing::Custom).is_err());
        assert!(TimeGrid::from_points(vec![1.0, 1.0], Spacing::Custom).is_err());
        assert!(TimeGrid::from_points(vec![0.5, 1.0], Spacing::Custom).is_err());
    }
}
