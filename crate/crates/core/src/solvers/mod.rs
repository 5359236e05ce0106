//! Base probability-flow ODE samplers.
//!
//! Every step is written against an [`OutputTransform`]: whenever a solver is about to
//! consume its (possibly high-order) denoising estimate, the estimate passes through the
//! transform first. The base samplers use [`Identity`]; the distilled samplers in
//! [`crate::dode`] plug in the single-parameter recombination.

pub mod deis;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserOracle, DenoisingOutput, Parameterization};
use crate::error::{DodeError, Result};
use crate::schedule::{NoiseSchedule, ScheduleKind, TimeGrid};

pub use deis::{deis_coefficients, DEFAULT_QUADRATURE_NODES};

pub const HISTORY_CAPACITY: usize = 4;

/// iPNDM warm-up and steady-state weights as `(numerators, denominator)`, most recent first.
pub const IPNDM_COEFFICIENTS: [(&[i64], i64); 4] = [
    (&[1], 1),
    (&[3, -1], 2),
    (&[23, -16, 5], 12),
    (&[55, -59, 37, -9], 24),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SolverKind {
    DdimNoise,
    DdimData,
    Ipndm,
    Dpm1,
    Dpm2,
    Dpm3,
    /// tAB-DEIS with polynomial order `0..=3`.
    Deis(u8),
    EdmHeun,
}

impl SolverKind {
    pub const ALL: [SolverKind; 11] = [
        SolverKind::DdimNoise,
        SolverKind::DdimData,
        SolverKind::Ipndm,
        SolverKind::Dpm1,
        SolverKind::Dpm2,
        SolverKind::Dpm3,
        SolverKind::Deis(0),
        SolverKind::Deis(1),
        SolverKind::Deis(2),
        SolverKind::Deis(3),
        SolverKind::EdmHeun,
    ];

    pub fn required_schedule(self) -> ScheduleKind {
        match self {
            SolverKind::DdimData | SolverKind::EdmHeun => ScheduleKind::VeKarras,
            _ => ScheduleKind::VpLinear,
        }
    }

    pub fn parameterization(self) -> Parameterization {
        match self {
            SolverKind::DdimData | SolverKind::EdmHeun => Parameterization::DataPrediction,
            _ => Parameterization::NoisePrediction,
        }
    }

    /// Number of transformable stages in one step.
    pub fn stage_count(self, final_step: bool) -> usize {
        match self {
            SolverKind::Dpm2 => 2,
            SolverKind::Dpm3 => 3,
            SolverKind::EdmHeun if !final_step => 2,
            _ => 1,
        }
    }

    /// Oracle calls per step.
    pub fn nfe_per_step(self, final_step: bool) -> usize {
        self.stage_count(final_step)
    }

    /// True when some stage lands strictly inside a grid interval.
    pub fn has_interior_stages(self) -> bool {
        matches!(self, SolverKind::Dpm2 | SolverKind::Dpm3)
    }

    /// DDIM in the parameterization that matches this solver's schedule.
    pub fn first_order_counterpart(self) -> SolverKind {
        match self.parameterization() {
            Parameterization::DataPrediction => SolverKind::DdimData,
            Parameterization::NoisePrediction => SolverKind::DdimNoise,
        }
    }

    pub fn check_compatible(self, schedule: &NoiseSchedule, oracle: &DenoiserOracle) -> Result<()> {
        if schedule.kind() != self.required_schedule() {
            return Err(DodeError::Config(format!(
                "solver {self} requires a {:?} schedule",
                self.required_schedule()
            )));
        }
        if oracle.parameterization() != self.parameterization() {
            return Err(DodeError::Config(format!(
                "solver {self} requires a {:?} oracle",
                self.parameterization()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolverKind::DdimNoise => f.write_str("ddim"),
            SolverKind::DdimData => f.write_str("ddim-data"),
            SolverKind::Ipndm => f.write_str("ipndm"),
            SolverKind::Dpm1 => f.write_str("dpm1"),
            SolverKind::Dpm2 => f.write_str("dpm2"),
            SolverKind::Dpm3 => f.write_str("dpm3"),
            SolverKind::Deis(r) => write!(f, "deis{r}"),
            SolverKind::EdmHeun => f.write_str("edm-heun"),
        }
    }
}

impl FromStr for SolverKind {
    type Err = DodeError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "ddim" | "ddim-noise" => SolverKind::DdimNoise,
            "ddim-data" => SolverKind::DdimData,
            "ipndm" => SolverKind::Ipndm,
            "dpm1" => SolverKind::Dpm1,
            "dpm2" => SolverKind::Dpm2,
            "dpm3" => SolverKind::Dpm3,
            "deis" => SolverKind::Deis(3),
            "deis0" => SolverKind::Deis(0),
            "deis1" => SolverKind::Deis(1),
            "deis2" => SolverKind::Deis(2),
            "deis3" => SolverKind::Deis(3),
            "edm-heun" | "edm" | "heun" => SolverKind::EdmHeun,
            other => return Err(DodeError::Config(format!("unknown solver kind '{other}'"))),
        })
    }
}

impl Serialize for SolverKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SolverKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Sample batch plus whatever a multistep method needs to remember.
#[derive(Clone, Debug)]
pub struct SolverState {
    pub x: Array2<f64>,
    pub step_index: usize,
    /// First-stage denoising outputs of past steps, most recent first.
    pub history: VecDeque<DenoisingOutput>,
    /// All oracle evaluations made during the last step, in stage order.
    pub stage_cache: Vec<DenoisingOutput>,
    /// The estimate the next step's first stage pairs with; `None` before the first step.
    pub prev_composite: Option<Array2<f64>>,
    pub nfe: usize,
    full_history: Option<Vec<Array2<f64>>>,
}

impl SolverState {
    pub fn new(x: Array2<f64>) -> Self {
        Self {
            x,
            step_index: 0,
            history: VecDeque::with_capacity(HISTORY_CAPACITY),
            stage_cache: Vec::new(),
            prev_composite: None,
            nfe: 0,
            full_history: None,
        }
    }

    /// Keeps every first-stage output, not only the last four.
    pub fn with_full_history(mut self) -> Self {
        self.full_history = Some(Vec::new());
        self
    }

    /// Every first-stage output so far, oldest first (only when enabled).
    pub fn full_history(&self) -> Option<&[Array2<f64>]> {
        self.full_history.as_deref()
    }

    fn record(&mut self, d: DenoisingOutput) {
        if let Some(all) = self.full_history.as_mut() {
            all.push(d.value.clone());
        }
        if self.history.len() == HISTORY_CAPACITY {
            self.history.pop_back();
        }
        self.history.push_front(d);
    }
}

/// Where a stage sits in the run, handed to the transform.
pub struct StageContext<'a> {
    pub step_index: usize,
    pub stage: usize,
    /// State at the start of the step (history does not yet include the current output).
    pub state: &'a SolverState,
}

/// What the current estimate is paired with.
#[derive(Clone, Copy)]
pub enum Previous<'a> {
    /// An earlier denoising estimate.
    Output(&'a Array2<f64>),
    /// No earlier estimate exists; this is the initial noisy sample.
    Initial(&'a Array2<f64>),
}

impl<'a> Previous<'a> {
    pub fn value(&self) -> &'a Array2<f64> {
        match *self {
            Previous::Output(v) | Previous::Initial(v) => v,
        }
    }
}

pub trait OutputTransform {
    fn apply(&self, ctx: &StageContext<'_>, estimate: Array2<f64>, previous: Previous<'_>) -> Result<Array2<f64>>;
}

/// Leaves every estimate untouched.
pub struct Identity;

impl OutputTransform for Identity {
    fn apply(&self, _: &StageContext<'_>, estimate: Array2<f64>, _: Previous<'_>) -> Result<Array2<f64>> {
        Ok(estimate)
    }
}

/// Result of one step: the new state and the sample after each stage.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub state: SolverState,
    /// `(time, sample)` reached at the end of each stage; the last entry is the new state.
    pub stage_states: Vec<(f64, Array2<f64>)>,
}

/// A solver kind plus its tunable constants.
#[derive(Clone, Debug, PartialEq)]
pub struct Solver {
    pub kind: SolverKind,
    /// Log-SNR fractions of the two interior DPM-Solver-3 nodes.
    pub dpm3_nodes: (f64, f64),
    pub deis_quadrature_nodes: usize,
}

impl Solver {
    pub fn new(kind: SolverKind) -> Self {
        Self {
            kind,
            dpm3_nodes: (1.0 / 3.0, 2.0 / 3.0),
            deis_quadrature_nodes: DEFAULT_QUADRATURE_NODES,
        }
    }

    /// Log-SNR fractions at which each stage ends, `1.0` meaning `t_prev`.
    pub fn stage_fractions(&self, final_step: bool) -> Vec<f64> {
        match self.kind {
            SolverKind::Dpm2 => vec![0.5, 1.0],
            SolverKind::Dpm3 => vec![self.dpm3_nodes.0, self.dpm3_nodes.1, 1.0],
            k => vec![1.0; k.stage_count(final_step)],
        }
    }

    /// One step `t -> t_prev` with every estimate routed through `transform`.
    pub fn step(
        &self,
        state: &SolverState,
        oracle: &DenoiserOracle,
        schedule: &NoiseSchedule,
        t: f64,
        t_prev: f64,
        transform: &dyn OutputTransform,
    ) -> Result<StepOutcome> {
        if !(t >= t_prev) {
            return Err(DodeError::Domain(format!("step must go backward in time: {t} -> {t_prev}")));
        }
        match self.kind {
            SolverKind::DdimNoise | SolverKind::Dpm1 => ddim_noise(state, oracle, schedule, t, t_prev, transform),
            SolverKind::DdimData => ddim_data(state, oracle, schedule, t, t_prev, transform),
            SolverKind::Ipndm => ipndm(state, oracle, schedule, t, t_prev, transform),
            SolverKind::Dpm2 => dpm2(state, oracle, schedule, t, t_prev, transform),
            SolverKind::Dpm3 => dpm3(self.dpm3_nodes, state, oracle, schedule, t, t_prev, transform),
            SolverKind::Deis(r) => deis(r as usize, self.deis_quadrature_nodes, state, oracle, schedule, t, t_prev, transform),
            SolverKind::EdmHeun => edm_heun(state, oracle, schedule, t, t_prev, transform),
        }
    }
}

fn ctx(state: &SolverState, stage: usize) -> StageContext<'_> {
    StageContext {
        step_index: state.step_index,
        stage,
        state,
    }
}

fn previous_for_first_stage(state: &SolverState) -> Previous<'_> {
    match &state.prev_composite {
        Some(p) => Previous::Output(p),
        None => Previous::Initial(&state.x),
    }
}

fn evaluate(state: &mut SolverState, oracle: &DenoiserOracle, x: &Array2<f64>, t: f64, schedule: &NoiseSchedule) -> Result<DenoisingOutput> {
    let d = oracle.denoise(x.view(), t, schedule)?;
    state.nfe += 1;
    Ok(d)
}

fn finish(mut next: SolverState, x: Array2<f64>, composite: Array2<f64>, stage_states: Vec<(f64, Array2<f64>)>) -> StepOutcome {
    next.x = x;
    next.prev_composite = Some(composite);
    next.step_index += 1;
    StepOutcome {
        state: next,
        stage_states,
    }
}

/// `alpha_p (x - sigma_t e) / alpha_t + sigma_p e`.
pub(crate) fn ddim_update(x: &Array2<f64>, e: &Array2<f64>, (a_t, s_t): (f64, f64), (a_p, s_p): (f64, f64)) -> Array2<f64> {
    let mut out = x - &(e * s_t);
    out.mapv_inplace(|v| a_p * (v / a_t));
    out.scaled_add(s_p, e);
    out
}

fn ddim_noise(state: &SolverState, oracle: &DenoiserOracle, schedule: &NoiseSchedule, t: f64, t_prev: f64, transform: &dyn OutputTransform) -> Result<StepOutcome> {
    let (cur, prev) = (schedule.alpha_sigma(t)?, schedule.alpha_sigma(t_prev)?);
    let mut next = state.clone();
    let d = evaluate(&mut next, oracle, &state.x, t, schedule)?;
    let o = transform.apply(&ctx(state, 0), d.value.clone(), previous_for_first_stage(state))?;
    let x = ddim_update(&state.x, &o, cur, prev);
    let raw = d.value.clone();
    next.stage_cache = vec![d.clone()];
    next.record(d);
    Ok(finish(next, x.clone(), raw, vec![(t_prev, x)]))
}

fn ddim_data(state: &SolverState, oracle: &DenoiserOracle, schedule: &NoiseSchedule, t: f64, t_prev: f64, transform: &dyn OutputTransform) -> Result<StepOutcome> {
    let (_, s_t) = schedule.alpha_sigma(t)?;
    let (_, s_p) = schedule.alpha_sigma(t_prev)?;
    let mut next = state.clone();
    let d = evaluate(&mut next, oracle, &state.x, t, schedule)?;
    let o = transform.apply(&ctx(state, 0), d.value.clone(), previous_for_first_stage(state))?;
    let x = euler_data(&state.x, &o, s_t, s_p);
    let raw = d.value.clone();
    next.stage_cache = vec![d.clone()];
    next.record(d);
    Ok(finish(next, x.clone(), raw, vec![(t_prev, x)]))
}

/// `x + (sigma_t - sigma_p) (o - x) / sigma_t`.
fn euler_data(x: &Array2<f64>, o: &Array2<f64>, s_t: f64, s_p: f64) -> Array2<f64> {
    let slope = (o - x) / s_t;
    x + &(slope * (s_t - s_p))
}

/// iPNDM estimate of order `p` from the current output and `p` past outputs.
pub fn ipndm_combination(current: &Array2<f64>, past: &[&Array2<f64>]) -> Array2<f64> {
    let p = past.len().min(3);
    if p == 0 {
        return current.clone();
    }
    let (nums, den) = IPNDM_COEFFICIENTS[p];
    let mut acc = current * nums[0] as f64;
    for (&n, d) in nums[1..].iter().zip(past) {
        acc.scaled_add(n as f64, d);
    }
    acc / den as f64
}

fn ipndm(state: &SolverState, oracle: &DenoiserOracle, schedule: &NoiseSchedule, t: f64, t_prev: f64, transform: &dyn OutputTransform) -> Result<StepOutcome> {
    let (cur, prev) = (schedule.alpha_sigma(t)?, schedule.alpha_sigma(t_prev)?);
    let mut next = state.clone();
    let d = evaluate(&mut next, oracle, &state.x, t, schedule)?;
    let past: Vec<&Array2<f64>> = state.history.iter().take(3).map(|h| &h.value).collect();
    let composite = ipndm_combination(&d.value, &past);
    let o = transform.apply(&ctx(state, 0), composite.clone(), previous_for_first_stage(state))?;
    let x = ddim_update(&state.x, &o, cur, prev);
    next.stage_cache = vec![d.clone()];
    next.record(d);
    Ok(finish(next, x.clone(), composite, vec![(t_prev, x)]))
}

/// `exp(h) - 1` over `h`, minus one, stable near zero.
fn phi_minus_one(h: f64) -> f64 {
    if h.abs() < 1e-6 {
        h / 2.0 + h * h / 6.0
    } else {
        h.exp_m1() / h - 1.0
    }
}

fn dpm2(state: &SolverState, oracle: &DenoiserOracle, schedule: &NoiseSchedule, t: f64, t_prev: f64, transform: &dyn OutputTransform) -> Result<StepOutcome> {
    let (a_t, _) = schedule.alpha_sigma(t)?;
    let (a_p, s_p) = schedule.alpha_sigma(t_prev)?;
    let h = schedule.log_snr(t_prev)? - schedule.log_snr(t)?;
    let t_mid = schedule.log_snr_fraction_time(t, t_prev, 0.5)?;
    let (a_m, s_m) = schedule.alpha_sigma(t_mid)?;
    let mut next = state.clone();

    let d_t = evaluate(&mut next, oracle, &state.x, t, schedule)?;
    let o_t = transform.apply(&ctx(state, 0), d_t.value.clone(), previous_for_first_stage(state))?;
    let mut u = &state.x * (a_m / a_t);
    u.scaled_add(-s_m * (0.5 * h).exp_m1(), &o_t);

    let d_m = evaluate(&mut next, oracle, &u, t_mid, schedule)?;
    let o_m = transform.apply(&ctx(state, 1), d_m.value.clone(), Previous::Output(&d_t.value))?;
    let mut x = &state.x * (a_p / a_t);
    x.scaled_add(-s_p * h.exp_m1(), &o_m);

    let raw_last = d_m.value.clone();
    next.stage_cache = vec![d_t.clone(), d_m];
    next.record(d_t);
    Ok(finish(next, x.clone(), raw_last, vec![(t_mid, u), (t_prev, x)]))
}

#[allow(clippy::too_many_arguments)]
fn dpm3(
    (r1, r2): (f64, f64),
    state: &SolverState,
    oracle: &DenoiserOracle,
    schedule: &NoiseSchedule,
    t: f64,
    t_prev: f64,
    transform: &dyn OutputTransform,
) -> Result<StepOutcome> {
    let (a_t, _) = schedule.alpha_sigma(t)?;
    let (a_p, s_p) = schedule.alpha_sigma(t_prev)?;
    let h = schedule.log_snr(t_prev)? - schedule.log_snr(t)?;
    let t1 = schedule.log_snr_fraction_time(t, t_prev, r1)?;
    let t2 = schedule.log_snr_fraction_time(t, t_prev, r2)?;
    let (a_1, s_1) = schedule.alpha_sigma(t1)?;
    let (a_2, s_2) = schedule.alpha_sigma(t2)?;
    let mut next = state.clone();

    let e0 = evaluate(&mut next, oracle, &state.x, t, schedule)?;
    let o0 = transform.apply(&ctx(state, 0), e0.value.clone(), previous_for_first_stage(state))?;
    let mut u1 = &state.x * (a_1 / a_t);
    u1.scaled_add(-s_1 * (r1 * h).exp_m1(), &o0);

    let e1 = evaluate(&mut next, oracle, &u1, t1, schedule)?;
    let o1 = transform.apply(&ctx(state, 1), e1.value.clone(), Previous::Output(&e0.value))?;
    let d1 = &o1 - &o0;
    let mut u2 = &state.x * (a_2 / a_t);
    u2.scaled_add(-s_2 * (r2 * h).exp_m1(), &o0);
    u2.scaled_add(-s_2 * (r2 / r1) * phi_minus_one(r2 * h), &d1);

    let e2 = evaluate(&mut next, oracle, &u2, t2, schedule)?;
    let o2 = transform.apply(&ctx(state, 2), e2.value.clone(), Previous::Output(&e1.value))?;
    let d2 = &o2 - &o0;
    let mut x = &state.x * (a_p / a_t);
    x.scaled_add(-s_p * h.exp_m1(), &o0);
    x.scaled_add(-(s_p / r2) * phi_minus_one(h), &d2);

    let raw_last = e2.value.clone();
    next.stage_cache = vec![e0.clone(), e1, e2];
    next.record(e0);
    Ok(finish(next, x.clone(), raw_last, vec![(t1, u1), (t2, u2), (t_prev, x)]))
}

#[allow(clippy::too_many_arguments)]
fn deis(
    r: usize,
    n_sub: usize,
    state: &SolverState,
    oracle: &DenoiserOracle,
    schedule: &NoiseSchedule,
    t: f64,
    t_prev: f64,
    transform: &dyn OutputTransform,
) -> Result<StepOutcome> {
    let (a_t, _) = schedule.alpha_sigma(t)?;
    let (a_p, _) = schedule.alpha_sigma(t_prev)?;
    let mut next = state.clone();
    let d = evaluate(&mut next, oracle, &state.x, t, schedule)?;
    let order = r.min(state.history.len());
    let mut nodes = vec![t];
    nodes.extend(state.history.iter().take(order).map(|h| h.t));
    let coeffs = deis_coefficients(schedule, t, t_prev, &nodes, n_sub)?;
    let mut increment = &d.value * coeffs[0];
    for (c, h) in coeffs[1..].iter().zip(&state.history) {
        increment.scaled_add(*c, &h.value);
    }
    let o = transform.apply(&ctx(state, 0), increment.clone(), previous_for_first_stage(state))?;
    let mut x = &state.x * (a_p / a_t);
    x += &o;
    next.stage_cache = vec![d.clone()];
    next.record(d);
    Ok(finish(next, x.clone(), increment, vec![(t_prev, x)]))
}

fn edm_heun(state: &SolverState, oracle: &DenoiserOracle, schedule: &NoiseSchedule, t: f64, t_prev: f64, transform: &dyn OutputTransform) -> Result<StepOutcome> {
    let (_, s_t) = schedule.alpha_sigma(t)?;
    let (_, s_p) = schedule.alpha_sigma(t_prev)?;
    let final_step = t_prev <= schedule.t_min();
    let mut next = state.clone();

    let d_t = evaluate(&mut next, oracle, &state.x, t, schedule)?;
    let o_t = transform.apply(&ctx(state, 0), d_t.value.clone(), previous_for_first_stage(state))?;
    let slope = (&o_t - &state.x) / s_t;
    let x_pred = &state.x + &(&slope * (s_t - s_p));
    if final_step {
        let raw = d_t.value.clone();
        next.stage_cache = vec![d_t.clone()];
        next.record(d_t);
        return Ok(finish(next, x_pred.clone(), raw, vec![(t_prev, x_pred)]));
    }

    let d_p = evaluate(&mut next, oracle, &x_pred, t_prev, schedule)?;
    let o_p = transform.apply(&ctx(state, 1), d_p.value.clone(), Previous::Output(&d_t.value))?;
    let slope_p = (&o_p - &x_pred) / s_p;
    let avg = (slope * 0.5) + &(slope_p * 0.5);
    let x = &state.x + &(avg * (s_t - s_p));
    let raw_last = d_p.value.clone();
    next.stage_cache = vec![d_t.clone(), d_p];
    next.record(d_t);
    Ok(finish(next, x.clone(), raw_last, vec![(t_prev, x_pred), (t_prev, x)]))
}

macro_rules! base_step {
    ($(#[$m:meta])* $name:ident, $kind:expr) => {
        $(#[$m])*
        pub fn $name(state: &SolverState, oracle: &DenoiserOracle, schedule: &NoiseSchedule, t: f64, t_prev: f64) -> Result<SolverState> {
            Ok(Solver::new($kind).step(state, oracle, schedule, t, t_prev, &Identity)?.state)
        }
    };
}

base_step!(
    /// DDIM in the noise-prediction parameterization.
    ddim_step, SolverKind::DdimNoise);
base_step!(
    /// DDIM in the data-prediction parameterization (Euler in sigma on a VE schedule).
    ddim_data_step, SolverKind::DdimData);
base_step!(ipndm_step, SolverKind::Ipndm);
base_step!(dpm_solver2_step, SolverKind::Dpm2);
base_step!(dpm_solver3_step, SolverKind::Dpm3);
base_step!(edm_heun_step, SolverKind::EdmHeun);

pub fn deis_step(state: &SolverState, oracle: &DenoiserOracle, schedule: &NoiseSchedule, t: f64, t_prev: f64, r: u8) -> Result<SolverState> {
    if r > 3 {
        return Err(DodeError::Config(format!("deis order {r} not in 0..=3")));
    }
    Ok(Solver::new(SolverKind::Deis(r)).step(state, oracle, schedule, t, t_prev, &Identity)?.state)
}

/// Per-interval DPM-Solver orders for a budget of `nfe` evaluations: order-`order` steps
/// while they fit, then one lower-order step for the remainder.
pub fn dpm_order_plan(nfe: usize, order: usize) -> Vec<usize> {
    let order = order.clamp(1, 3);
    let mut plan = vec![order; nfe / order];
    if !nfe.is_multiple_of(order) {
        plan.push(nfe % order);
    }
    plan
}

/// Recorded run of a sampler.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub kind: SolverKind,
    pub times: Vec<f64>,
    /// States at every grid time when recorded, otherwise only the final state.
    pub states: Vec<Array2<f64>>,
    /// First-stage denoising output of each step (recorded runs only).
    pub outputs: Vec<DenoisingOutput>,
    pub nfe: usize,
}

impl Trajectory {
    pub fn final_state(&self) -> &Array2<f64> {
        self.states.last().expect("trajectory has a state")
    }

    pub fn is_recorded(&self) -> bool {
        self.states.len() == self.times.len()
    }
}

/// Runs `step_fn` over every interval of `grid` and collects the trajectory.
pub fn drive<F>(
    kind: SolverKind,
    grid: &TimeGrid,
    x_init: Array2<f64>,
    record: bool,
    step_fn: F,
) -> Result<Trajectory>
where
    F: FnMut(usize, &SolverState, f64, f64) -> Result<StepOutcome>,
{
    drive_from(kind, grid, SolverState::new(x_init), record, step_fn)
}

/// [`drive`] starting from a prepared state.
pub fn drive_from<F>(
    kind: SolverKind,
    grid: &TimeGrid,
    mut state: SolverState,
    record: bool,
    mut step_fn: F,
) -> Result<Trajectory>
where
    F: FnMut(usize, &SolverState, f64, f64) -> Result<StepOutcome>,
{
    let mut states = Vec::new();
    let mut outputs = Vec::new();
    if record {
        states.push(state.x.clone());
    }
    for (i, (t, t_prev)) in grid.intervals().enumerate() {
        let outcome = step_fn(i, &state, t, t_prev).map_err(|e| e.at_step(i))?;
        state = outcome.state;
        if state.x.iter().any(|v| !v.is_finite()) {
            return Err(DodeError::NonFinite {
                step: i,
                what: "sample state".into(),
            });
        }
        if record {
            states.push(state.x.clone());
            outputs.push(state.history[0].clone());
        }
    }
    if !record {
        states.push(state.x);
    }
    Ok(Trajectory {
        kind,
        times: grid.points().to_vec(),
        states,
        outputs,
        nfe: state.nfe,
    })
}

pub(crate) fn check_run_inputs(kind: SolverKind, oracle: &DenoiserOracle, schedule: &NoiseSchedule, grid: &TimeGrid, x_init: &Array2<f64>) -> Result<()> {
    kind.check_compatible(schedule, oracle)?;
    grid.check_within(schedule)?;
    if x_init.ncols() != oracle.dim() || x_init.nrows() == 0 {
        return Err(DodeError::ShapeMismatch {
            expected: vec![x_init.nrows().max(1), oracle.dim()],
            got: x_init.shape().to_vec(),
        });
    }
    Ok(())
}

/// Runs the base solver over `grid` from `x_init`.
pub fn run_sampler(
    kind: SolverKind,
    oracle: &DenoiserOracle,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    x_init: Array2<f64>,
    record: bool,
) -> Result<Trajectory> {
    run_solver(&Solver::new(kind), oracle, schedule, grid, x_init, record)
}

pub fn run_solver(
    solver: &Solver,
    oracle: &DenoiserOracle,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    x_init: Array2<f64>,
    record: bool,
) -> Result<Trajectory> {
    check_run_inputs(solver.kind, oracle, schedule, grid, &x_init)?;
    drive(solver.kind, grid, x_init, record, |_, s, t, tp| {
        solver.step(s, oracle, schedule, t, tp, &Identity)
    })
}

/// DPM-Solver run where interval `i` uses order `orders[i]`.
pub fn run_dpm_plan(
    orders: &[usize],
    oracle: &DenoiserOracle,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    x_init: Array2<f64>,
    record: bool,
) -> Result<Trajectory> {
    if orders.len() != grid.n_steps() {
        return Err(DodeError::Config(format!(
            "order plan has {} entries for {} intervals",
            orders.len(),
            grid.n_steps()
        )));
    }
    let solvers: Vec<Solver> = orders
        .iter()
        .map(|&o| match o {
            1 => Ok(Solver::new(SolverKind::Dpm1)),
            2 => Ok(Solver::new(SolverKind::Dpm2)),
            3 => Ok(Solver::new(SolverKind::Dpm3)),
            o => Err(DodeError::Config(format!("dpm order {o} not in 1..=3"))),
        })
        .collect::<Result<_>>()?;
    check_run_inputs(SolverKind::Dpm1, oracle, schedule, grid, &x_init)?;
    let kind = solvers.iter().map(|s| s.kind).max_by_key(|k| k.stage_count(false)).unwrap_or(SolverKind::Dpm1);
    drive(kind, grid, x_init, record, |i, s, t, tp| {
        solvers[i].step(s, oracle, schedule, t, tp, &Identity)
    })
}
