//! Distilled solvers: every denoising estimate `d_t` a solver consumes is replaced by
//! `O_t = d_t + lambda_t (d_t - d_prev)`, with one scalar per step and stage.
//!
//! `d_prev` is the estimate of the same kind produced just before: the previous step's
//! estimate for single-stage solvers (the iPNDM combination, the DEIS increment), the
//! preceding stage's raw output inside multi-stage steps, and the initial sample `x_T`
//! at the very first step.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserOracle;
use crate::error::{DodeError, Result};
use crate::schedule::{NoiseSchedule, TimeGrid};
use crate::solvers::{
    check_run_inputs, drive_from, OutputTransform, Previous, Solver, SolverKind, SolverState, StageContext,
    StepOutcome, Trajectory,
};

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DodeError::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `d_t + lambda (d_t - d_prev)`.
pub fn combine(d_t: &Array2<f64>, d_prev: &Array2<f64>, lambda: f64) -> Result<Array2<f64>> {
    check_same_shape(d_t, d_prev)?;
    if lambda == 0.0 {
        return Ok(d_t.clone());
    }
    let mut out = d_t - d_prev;
    out.mapv_inplace(|v| lambda * v);
    out += d_t;
    Ok(out)
}

/// First-step variant pairing `d_T` with the noisy sample `x_T`.
pub fn combine_initial(d_big_t: &Array2<f64>, x_big_t: &Array2<f64>, lambda: f64) -> Result<Array2<f64>> {
    combine(d_big_t, x_big_t, lambda)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DOdeFormulation {
    /// `d_t + l (d_t - d_prev)`.
    #[default]
    Standard,
    /// `l1 d_t + l2 d_{t+1}`.
    Sep,
    /// `sum_k l_k d_k` over every output so far.
    All,
    /// `d_t + l1 (d_t - d_{t+1}) + l2 (d_t - d_{t+2})`.
    TwoTerm,
}

impl DOdeFormulation {
    /// Weights that reproduce the base solver.
    pub fn neutral_weights(self, arity: usize) -> Vec<f64> {
        let mut w = vec![0.0; arity];
        if matches!(self, DOdeFormulation::Sep | DOdeFormulation::All) && arity > 0 {
            w[0] = 1.0;
        }
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum LambdaMode {
    Fitted,
    Fixed(f64),
    Zero,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub teacher: Option<SolverKind>,
    pub scale: usize,
    pub batch: usize,
    pub seed: u64,
}

/// Per-step (and per-stage) weights of a distilled solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub kind: SolverKind,
    #[serde(default)]
    pub formulation: DOdeFormulation,
    pub mode: LambdaMode,
    #[serde(flatten)]
    pub provenance: Provenance,
    pub values: Vec<Vec<f64>>,
}

/// Stage arity of every step for `kind` on an `n_steps` grid ending at the schedule minimum.
pub fn expected_arity(kind: SolverKind, formulation: DOdeFormulation, n_steps: usize) -> Vec<usize> {
    (0..n_steps)
        .map(|i| match formulation {
            DOdeFormulation::Standard => kind.stage_count(i + 1 == n_steps),
            DOdeFormulation::Sep | DOdeFormulation::TwoTerm => 2,
            DOdeFormulation::All => i + 1,
        })
        .collect()
}

impl LambdaSchedule {
    pub fn zero(kind: SolverKind, n_steps: usize) -> Self {
        Self::filled(kind, n_steps, 0.0, LambdaMode::Zero)
    }

    /// Same `lambda` for every step and stage.
    pub fn fixed(kind: SolverKind, n_steps: usize, lambda: f64) -> Self {
        Self::filled(kind, n_steps, lambda, LambdaMode::Fixed(lambda))
    }

    fn filled(kind: SolverKind, n_steps: usize, v: f64, mode: LambdaMode) -> Self {
        Self {
            kind,
            formulation: DOdeFormulation::Standard,
            mode,
            provenance: Provenance::default(),
            values: expected_arity(kind, DOdeFormulation::Standard, n_steps)
                .into_iter()
                .map(|k| vec![v; k])
                .collect(),
        }
    }

    /// Base-solver weights for an alternative formulation.
    pub fn neutral(kind: SolverKind, formulation: DOdeFormulation, n_steps: usize) -> Self {
        Self {
            kind,
            formulation,
            mode: LambdaMode::Zero,
            provenance: Provenance::default(),
            values: expected_arity(kind, formulation, n_steps)
                .into_iter()
                .map(|k| formulation.neutral_weights(k))
                .collect(),
        }
    }

    pub fn n_steps(&self) -> usize {
        self.values.len()
    }

    pub fn validate(&self, kind: SolverKind, n_steps: usize) -> Result<()> {
        if kind != self.kind {
            return Err(DodeError::Config(format!(
                "lambda schedule is for {} but solver is {kind}",
                self.kind
            )));
        }
        if self.formulation != DOdeFormulation::Standard && !matches!(kind, SolverKind::DdimNoise | SolverKind::DdimData) {
            return Err(DodeError::Config("alternative formulations are defined on DDIM only".into()));
        }
        let want = expected_arity(kind, self.formulation, n_steps);
        let got: Vec<usize> = self.values.iter().map(Vec::len).collect();
        if want != got {
            return Err(DodeError::Config(format!(
                "lambda arity mismatch: expected {want:?}, got {got:?}"
            )));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DodeError::Config("lambda schedule has non-finite values".into()));
        }
        if self.mode == LambdaMode::Zero
            && self.formulation == DOdeFormulation::Standard
            && self.values.iter().flatten().any(|&v| v != 0.0)
        {
            return Err(DodeError::Config("zero-mode schedule has nonzero values".into()));
        }
        Ok(())
    }
}

/// The recombination as a solver hook.
pub struct LambdaTransform<'a> {
    pub formulation: DOdeFormulation,
    pub weights: &'a [f64],
}

impl OutputTransform for LambdaTransform<'_> {
    fn apply(&self, ctx: &StageContext<'_>, estimate: Array2<f64>, previous: Previous<'_>) -> Result<Array2<f64>> {
        let w = self.weights;
        let arg = |i: usize| -> Result<f64> {
            w.get(i)
                .copied()
                .ok_or_else(|| DodeError::Config(format!("missing weight {i} for stage {}", ctx.stage)))
        };
        match self.formulation {
            DOdeFormulation::Standard => {
                let lambda = arg(ctx.stage)?;
                match previous {
                    Previous::Output(p) => combine(&estimate, p, lambda),
                    Previous::Initial(x) => combine_initial(&estimate, x, lambda),
                }
            }
            DOdeFormulation::Sep => {
                let p = previous.value();
                check_same_shape(&estimate, p)?;
                let mut out = &estimate * arg(0)?;
                out.scaled_add(arg(1)?, p);
                Ok(out)
            }
            DOdeFormulation::All => {
                let past = ctx
                    .state
                    .full_history()
                    .ok_or_else(|| DodeError::Config("all-history formulation needs full history".into()))?;
                if w.len() != past.len() + 1 {
                    return Err(DodeError::Config(format!(
                        "all-history step {} needs {} weights, got {}",
                        ctx.step_index,
                        past.len() + 1,
                        w.len()
                    )));
                }
                let mut out = &estimate * w[0];
                for (wk, d) in w[1..].iter().zip(past.iter().rev()) {
                    out.scaled_add(*wk, d);
                }
                Ok(out)
            }
            DOdeFormulation::TwoTerm => {
                let (l1, l2) = (arg(0)?, arg(1)?);
                let hist = &ctx.state.history;
                if hist.len() < 2 {
                    return match previous {
                        Previous::Output(p) => combine(&estimate, p, l1),
                        Previous::Initial(x) => combine_initial(&estimate, x, l1),
                    };
                }
                let mut out = combine(&estimate, &hist[0].value, l1)?;
                if l2 != 0.0 {
                    let diff = &estimate - &hist[1].value;
                    out.scaled_add(l2, &diff);
                }
                Ok(out)
            }
        }
    }
}

fn is_final(schedule: &NoiseSchedule, t_prev: f64) -> bool {
    t_prev <= schedule.t_min()
}

/// One distilled step; `lambdas` holds one value per stage.
pub fn d_step_outcome(
    solver: &Solver,
    state: &SolverState,
    oracle: &DenoiserOracle,
    schedule: &NoiseSchedule,
    t: f64,
    t_prev: f64,
    lambdas: &[f64],
) -> Result<StepOutcome> {
    let want = solver.kind.stage_count(is_final(schedule, t_prev));
    if lambdas.len() != want {
        return Err(DodeError::Config(format!(
            "{} step needs {want} lambda values, got {}",
            solver.kind,
            lambdas.len()
        )));
    }
    solver.step(
        state,
        oracle,
        schedule,
        t,
        t_prev,
        &LambdaTransform {
            formulation: DOdeFormulation::Standard,
            weights: lambdas,
        },
    )
}

pub fn d_step(
    kind: SolverKind,
    state: &SolverState,
    oracle: &DenoiserOracle,
    schedule: &NoiseSchedule,
    t: f64,
    t_prev: f64,
    lambdas: &[f64],
) -> Result<SolverState> {
    Ok(d_step_outcome(&Solver::new(kind), state, oracle, schedule, t, t_prev, lambdas)?.state)
}

/// One DDIM step under an alternative formulation.
#[allow(clippy::too_many_arguments)]
pub fn d_step_alt_outcome(
    formulation: DOdeFormulation,
    kind: SolverKind,
    state: &SolverState,
    oracle: &DenoiserOracle,
    schedule: &NoiseSchedule,
    t: f64,
    t_prev: f64,
    weights: &[f64],
) -> Result<StepOutcome> {
    if !matches!(kind, SolverKind::DdimNoise | SolverKind::DdimData) {
        return Err(DodeError::Unsupported(format!(
            "alternative formulations are defined on DDIM only, not {kind}"
        )));
    }
    Solver::new(kind).step(state, oracle, schedule, t, t_prev, &LambdaTransform { formulation, weights })
}

#[allow(clippy::too_many_arguments)]
pub fn d_step_alt(
    formulation: DOdeFormulation,
    kind: SolverKind,
    state: &SolverState,
    oracle: &DenoiserOracle,
    schedule: &NoiseSchedule,
    t: f64,
    t_prev: f64,
    weights: &[f64],
) -> Result<SolverState> {
    Ok(d_step_alt_outcome(formulation, kind, state, oracle, schedule, t, t_prev, weights)?.state)
}

/// Fresh state for a distilled run, keeping full history when the formulation needs it.
pub fn initial_state(formulation: DOdeFormulation, x_init: Array2<f64>) -> SolverState {
    let s = SolverState::new(x_init);
    if formulation == DOdeFormulation::All {
        s.with_full_history()
    } else {
        s
    }
}

/// One step of whichever formulation `lambdas` carries.
#[allow(clippy::too_many_arguments)]
pub fn scheduled_step(
    solver: &Solver,
    formulation: DOdeFormulation,
    state: &SolverState,
    oracle: &DenoiserOracle,
    schedule: &NoiseSchedule,
    t: f64,
    t_prev: f64,
    weights: &[f64],
) -> Result<StepOutcome> {
    match formulation {
        DOdeFormulation::Standard => d_step_outcome(solver, state, oracle, schedule, t, t_prev, weights),
        f => d_step_alt_outcome(f, solver.kind, state, oracle, schedule, t, t_prev, weights),
    }
}

/// Runs the distilled solver with a frozen schedule.
pub fn run_d_sampler(
    solver: &Solver,
    oracle: &DenoiserOracle,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    x_init: Array2<f64>,
    lambdas: &LambdaSchedule,
    record: bool,
) -> Result<Trajectory> {
    check_run_inputs(solver.kind, oracle, schedule, grid, &x_init)?;
    lambdas.validate(solver.kind, grid.n_steps())?;
    let formulation = lambdas.formulation;
    drive_from(solver.kind, grid, initial_state(formulation, x_init), record, |i, s, t, tp| {
        scheduled_step(solver, formulation, s, oracle, schedule, t, tp, &lambdas.values[i])
    })
}

/// Evaluates `metric` on the final batch of constant-lambda D-DDIM runs.
pub fn fixed_lambda_search<M>(
    kind: SolverKind,
    oracle: &DenoiserOracle,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    x_init: &Array2<f64>,
    lambda_grid: &[f64],
    mut metric: M,
) -> Result<(f64, Vec<(f64, f64)>)>
where
    M: FnMut(&Array2<f64>) -> f64,
{
    if !matches!(kind, SolverKind::DdimNoise | SolverKind::DdimData) {
        return Err(DodeError::Unsupported("fixed-lambda search is defined on DDIM".into()));
    }
    if lambda_grid.is_empty() {
        return Err(DodeError::Empty("lambda grid".into()));
    }
    let solver = Solver::new(kind);
    let mut curve = Vec::with_capacity(lambda_grid.len());
    for &l in lambda_grid {
        let sched = LambdaSchedule::fixed(kind, grid.n_steps(), l);
        let tr = run_d_sampler(&solver, oracle, schedule, grid, x_init.clone(), &sched, false)?;
        curve.push((l, metric(tr.final_state())));
    }
    let best = curve
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(l, _)| l)
        .expect("non-empty");
    Ok((best, curve))
}
