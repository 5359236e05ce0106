//! Teacher/student fitting of the per-step weights.
//!
//! A teacher solver runs `C * T` steps from the same initial noise as the student. The
//! student then walks its own `T`-step grid; at every step (and every stage, inner stages
//! first) the post-stage sample is affine in the stage weight, `x(l) = a + l b`, so the
//! squared distance to the teacher sample at the same time is minimized in closed form.
//! The student advances with the fitted weight before the next step is fitted.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::analysis::sliced_wasserstein;
use crate::denoiser::DenoiserOracle;
use crate::dode::{expected_arity, initial_state, run_d_sampler, scheduled_step, DOdeFormulation, LambdaMode, LambdaSchedule, Provenance};
use crate::error::{DodeError, Result};
use crate::noise::{held_out_seeds, initial_noise, rng};
use crate::schedule::{make_grid, NoiseSchedule, ScheduleKind, Spacing, TimeGrid};
use crate::solvers::{run_solver, Solver, SolverKind, Trajectory};

/// Largest teacher grid accepted.
pub const MAX_TEACHER_STEPS: usize = 200_000;

/// Tolerance used to locate student and stage times on the teacher grid.
pub const TIME_MATCH_TOL: f64 = 1e-12;

/// Below this `sum ||b||^2` the direction is treated as degenerate and `lambda = 0`.
pub const DEGENERATE_DIRECTION: f64 = 1e-20;

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub schedule: NoiseSchedule,
    /// The data distribution; re-parameterized per solver as needed.
    pub oracle: DenoiserOracle,
    pub student: SolverKind,
    /// `None` picks the default teacher for the student.
    pub teacher: Option<SolverKind>,
    pub formulation: DOdeFormulation,
    /// Teacher-to-student step ratio `C`.
    pub scale: usize,
    /// Student steps `T`.
    pub steps: usize,
    /// Fitting batch size `|B|`.
    pub batch: usize,
    pub seed: u64,
    /// `None` uses the schedule's natural spacing.
    pub spacing: Option<Spacing>,
    /// Number of consecutive batches pooled into one fit. 1 fits on the first batch only.
    pub fit_batches: usize,
}

impl DistillConfig {
    /// Defaults `C = 10`, `|B| = 100`, seed 0.
    pub fn new(schedule: NoiseSchedule, oracle: DenoiserOracle, student: SolverKind, steps: usize) -> Self {
        Self {
            schedule,
            oracle,
            student,
            teacher: None,
            formulation: DOdeFormulation::Standard,
            scale: 10,
            steps,
            batch: 100,
            seed: 0,
            spacing: None,
            fit_batches: 1,
        }
    }

    /// iPNDM and DEIS teach themselves; everything else is taught by DDIM in its own parameterization.
    pub fn resolve_teacher(&self) -> SolverKind {
        self.teacher.unwrap_or(match self.student {
            k @ (SolverKind::Ipndm | SolverKind::Deis(_)) => k,
            k => k.first_order_counterpart(),
        })
    }

    pub fn resolve_spacing(&self) -> Spacing {
        self.spacing.unwrap_or(match self.schedule.kind() {
            ScheduleKind::VpLinear => Spacing::UniformT,
            ScheduleKind::VeKarras => Spacing::KarrasRho,
        })
    }

    pub fn student_oracle(&self) -> DenoiserOracle {
        self.oracle.with_parameterization(self.student.parameterization())
    }

    pub fn teacher_oracle(&self) -> DenoiserOracle {
        self.oracle.with_parameterization(self.resolve_teacher().parameterization())
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        for (name, v) in [
            ("scale", self.scale),
            ("steps", self.steps),
            ("batch", self.batch),
            ("fit_batches", self.fit_batches),
        ] {
            if v == 0 {
                return Err(DodeError::Config(format!("{name} must be positive")));
            }
        }
        match self.scale.checked_mul(self.steps) {
            Some(n) if n <= MAX_TEACHER_STEPS => {}
            _ => {
                return Err(DodeError::Config(format!(
                    "teacher grid of {} x {} steps exceeds {MAX_TEACHER_STEPS}",
                    self.scale, self.steps
                )))
            }
        }
        match self.student {
            SolverKind::Dpm2 if !self.scale.is_multiple_of(2) => {
                return Err(DodeError::Config(format!("dpm2 student needs an even scale, got {}", self.scale)))
            }
            SolverKind::Dpm3 if !self.scale.is_multiple_of(3) => {
                return Err(DodeError::Config(format!(
                    "dpm3 student needs a scale divisible by 3, got {}",
                    self.scale
                )))
            }
            _ => {}
        }
        if self.resolve_spacing() == Spacing::Custom {
            return Err(DodeError::Config("distillation needs a generated grid spacing".into()));
        }
        if self.formulation != DOdeFormulation::Standard
            && !matches!(self.student, SolverKind::DdimNoise | SolverKind::DdimData)
        {
            return Err(DodeError::Config("alternative formulations are defined on DDIM only".into()));
        }
        self.student.check_compatible(&self.schedule, &self.student_oracle())?;
        self.resolve_teacher().check_compatible(&self.schedule, &self.teacher_oracle())?;
        Ok(())
    }

    pub fn student_grid(&self) -> Result<TimeGrid> {
        make_grid(&self.schedule, self.steps, self.resolve_spacing())
    }

    /// The `C`-times finer grid; log-SNR refinement when the student has interior stages.
    pub fn teacher_grid(&self) -> Result<TimeGrid> {
        if self.student.has_interior_stages() {
            self.student_grid()?.refine_log_snr(&self.schedule, self.scale)
        } else {
            make_grid(&self.schedule, self.steps * self.scale, self.resolve_spacing())
        }
    }

    /// The shared initial noise of every pooled fitting batch.
    pub fn initial_batch(&self) -> Array2<f64> {
        initial_noise(&self.schedule, self.batch * self.fit_batches, self.oracle.dim(), self.seed)
    }
}

/// Recorded teacher run from the shared initial noise.
pub fn teacher_targets(config: &DistillConfig) -> Result<Trajectory> {
    config.validate()?;
    let grid = config.teacher_grid()?;
    run_solver(
        &Solver::new(config.resolve_teacher()),
        &config.teacher_oracle(),
        &config.schedule,
        &grid,
        config.initial_batch(),
        true,
    )
}

fn target_at(teacher: &Trajectory, t: f64) -> Result<&Array2<f64>> {
    teacher
        .times
        .iter()
        .position(|&p| (p - t).abs() <= TIME_MATCH_TOL)
        .map(|i| &teacher.states[i])
        .ok_or_else(|| DodeError::Config(format!("time {t} is not on the teacher grid")))
}

/// Result of one scalar fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaFit {
    pub lambda: f64,
    /// `sum ||target - a||^2`.
    pub obj0: f64,
    /// `sum ||target - a - lambda b||^2`.
    pub obj_star: f64,
    pub degenerate: bool,
}

fn check_shapes(target: &ArrayView2<f64>, other: &ArrayView2<f64>) -> Result<()> {
    if target.shape() != other.shape() {
        return Err(DodeError::ShapeMismatch {
            expected: target.shape().to_vec(),
            got: other.shape().to_vec(),
        });
    }
    Ok(())
}

fn sum_sq_residual(target: &ArrayView2<f64>, a: &ArrayView2<f64>, b: &ArrayView2<f64>, lambda: f64) -> f64 {
    let mut acc = 0.0;
    Zip::from(target).and(a).and(b).for_each(|&y, &p, &q| {
        let r = y - (p + lambda * q);
        acc += r * r;
    });
    acc
}

/// Residual of the affine candidate `a + lambda b` against `target`.
pub fn objective(target: ArrayView2<f64>, a: ArrayView2<f64>, b: ArrayView2<f64>, lambda: f64) -> f64 {
    sum_sq_residual(&target, &a, &b, lambda)
}

/// `lambda* = sum <target - a, b> / sum ||b||^2` over the whole batch.
pub fn fit_lambda_closed_form(target: ArrayView2<f64>, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<LambdaFit> {
    check_shapes(&target, &a)?;
    check_shapes(&target, &b)?;
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(DodeError::NonFinite {
            step: 0,
            what: "fit direction".into(),
        });
    }
    let (mut num, mut den) = (0.0, 0.0);
    Zip::from(&target).and(&a).and(&b).for_each(|&y, &p, &q| {
        num += (y - p) * q;
        den += q * q;
    });
    let degenerate = den < DEGENERATE_DIRECTION;
    let lambda = if degenerate { 0.0 } else { num / den };
    let obj0 = sum_sq_residual(&target, &a, &b, 0.0);
    let obj_star = if lambda == 0.0 { obj0 } else { sum_sq_residual(&target, &a, &b, lambda) };
    Ok(LambdaFit {
        lambda,
        obj0,
        obj_star,
        degenerate,
    })
}

/// Minimum-norm least-squares weights for `a + sum_j w_j b_j`.
pub fn fit_weights_least_squares(target: ArrayView2<f64>, a: ArrayView2<f64>, directions: &[Array2<f64>]) -> Result<Vec<f64>> {
    check_shapes(&target, &a)?;
    for b in directions {
        check_shapes(&target, &b.view())?;
    }
    let m = directions.len();
    let r = &target - &a;
    let gram = DMatrix::from_fn(m, m, |j, k| (&directions[j] * &directions[k]).sum());
    let rhs = DVector::from_fn(m, |j, _| (&r * &directions[j]).sum());
    if gram.iter().chain(rhs.iter()).any(|v| !v.is_finite()) {
        return Err(DodeError::NonFinite {
            step: 0,
            what: "fit directions".into(),
        });
    }
    let scale = gram.diagonal().max();
    if m == 0 || scale < DEGENERATE_DIRECTION {
        return Ok(vec![0.0; m]);
    }
    let svd = gram.svd(true, true);
    let eps = 1e-12 * svd.singular_values.max();
    let w = svd.solve(&rhs, eps).map_err(|e| DodeError::Domain(e.to_string()))?;
    Ok(w.iter().copied().collect())
}

/// One row of the fitting log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub step: usize,
    pub stage: usize,
    /// Time the fitted stage lands on (where the target is taken).
    pub time: f64,
    pub lambda: f64,
    pub obj0: f64,
    pub obj_star: f64,
}

#[derive(Clone, Debug)]
pub struct DistillReport {
    pub rows: Vec<ReportRow>,
    pub teacher: SolverKind,
    pub teacher_steps: usize,
    pub teacher_nfe: usize,
    pub wall_time_secs: f64,
    /// Student states at every student grid time during fitting.
    pub student_states: Vec<Array2<f64>>,
}

impl DistillReport {
    pub fn max_lambda_abs(&self) -> f64 {
        self.rows.iter().map(|r| r.lambda.abs()).fold(0.0, f64::max)
    }

    /// Rows where the fitted objective exceeds the base one.
    pub fn optimality_violations(&self) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| !(r.obj_star <= r.obj0)).collect()
    }
}

/// Runs the teacher, then fits the student's weights step by step.
pub fn distill(config: &DistillConfig) -> Result<(LambdaSchedule, DistillReport)> {
    let started = Instant::now();
    config.validate()?;
    let teacher = teacher_targets(config)?;
    let grid = config.student_grid()?;
    let solver = Solver::new(config.student);
    let oracle = config.student_oracle();
    let schedule = &config.schedule;
    let n = grid.n_steps();
    let arity = expected_arity(config.student, config.formulation, n);

    let mut state = initial_state(config.formulation, config.initial_batch());
    let mut student_states = vec![state.x.clone()];
    let mut values = Vec::with_capacity(n);
    let mut rows = Vec::new();

    for (i, (t, t_prev)) in grid.intervals().enumerate() {
        let step_of = |e: DodeError| match e {
            DodeError::NonFinite { what, .. } => DodeError::NonFinite { step: i, what },
            e => e.at_step(i),
        };
        let eval = |w: &[f64]| scheduled_step(&solver, config.formulation, &state, &oracle, schedule, t, t_prev, w);
        let mut weights = config.formulation.neutral_weights(arity[i]);

        if config.formulation == DOdeFormulation::Standard {
            let fractions = solver.stage_fractions(t_prev <= schedule.t_min());
            for (stage, &frac) in fractions.iter().enumerate() {
                let time = schedule.log_snr_fraction_time(t, t_prev, frac).map_err(step_of)?;
                let target = target_at(&teacher, time).map_err(step_of)?;
                weights[stage] = 0.0;
                let a = eval(&weights).map_err(step_of)?.stage_states.swap_remove(stage).1;
                weights[stage] = 1.0;
                let b = eval(&weights).map_err(step_of)?.stage_states.swap_remove(stage).1 - &a;
                let fit = fit_lambda_closed_form(target.view(), a.view(), b.view()).map_err(step_of)?;
                weights[stage] = fit.lambda;
                rows.push(ReportRow {
                    step: i,
                    stage,
                    time,
                    lambda: fit.lambda,
                    obj0: fit.obj0,
                    obj_star: fit.obj_star,
                });
            }
        } else {
            let target = target_at(&teacher, t_prev).map_err(step_of)?;
            let m = weights.len();
            let zero = vec![0.0; m];
            let a = eval(&zero).map_err(step_of)?.state.x;
            let mut directions = Vec::with_capacity(m);
            for j in 0..m {
                let mut e = zero.clone();
                e[j] = 1.0;
                directions.push(eval(&e).map_err(step_of)?.state.x - &a);
            }
            let neutral = weights.clone();
            let fitted = fit_weights_least_squares(target.view(), a.view(), &directions).map_err(step_of)?;
            let combo = |w: &[f64]| {
                let mut x = a.clone();
                for (wj, b) in w.iter().zip(&directions) {
                    x.scaled_add(*wj, b);
                }
                x
            };
            let dist = |x: Array2<f64>| (target - &x).mapv(|v| v * v).sum();
            let (obj0, obj_star) = (dist(combo(&neutral)), dist(combo(&fitted)));
            // the neutral point is a feasible candidate, keep it if rounding says it is no worse
            weights = if obj_star <= obj0 { fitted } else { neutral };
            let obj_star = obj_star.min(obj0);
            for (stage, &w) in weights.iter().enumerate() {
                rows.push(ReportRow {
                    step: i,
                    stage,
                    time: t_prev,
                    lambda: w,
                    obj0,
                    obj_star,
                });
            }
        }

        state = eval(&weights).map_err(step_of)?.state;
        if state.x.iter().any(|v| !v.is_finite()) {
            return Err(DodeError::NonFinite {
                step: i,
                what: "student state".into(),
            });
        }
        student_states.push(state.x.clone());
        values.push(weights);
    }

    let lambdas = LambdaSchedule {
        kind: config.student,
        formulation: config.formulation,
        mode: LambdaMode::Fitted,
        provenance: Provenance {
            teacher: Some(config.resolve_teacher()),
            scale: config.scale,
            batch: config.batch,
            seed: config.seed,
        },
        values,
    };
    let report = DistillReport {
        rows,
        teacher: config.resolve_teacher(),
        teacher_steps: teacher.times.len() - 1,
        teacher_nfe: teacher.nfe,
        wall_time_secs: started.elapsed().as_secs_f64(),
        student_states,
    };
    Ok((lambdas, report))
}

/// Runs fresh batches of `n_samples` through the distilled solver, one per seed.
pub fn sample_with_schedule(
    config: &DistillConfig,
    lambdas: &LambdaSchedule,
    seeds: &[u64],
    n_samples: usize,
) -> Result<Vec<Array2<f64>>> {
    config.validate()?;
    let grid = config.student_grid()?;
    lambdas.validate(config.student, grid.n_steps())?;
    let solver = Solver::new(config.student);
    let oracle = config.student_oracle();
    seeds
        .iter()
        .map(|&s| {
            let x = initial_noise(&config.schedule, n_samples, oracle.dim(), s);
            run_d_sampler(&solver, &oracle, &config.schedule, &grid, x, lambdas, false).map(|tr| tr.final_state().clone())
        })
        .collect()
}

/// `m` held-out batches of size `|B|` derived from the config seed.
pub fn sample_batches(config: &DistillConfig, lambdas: &LambdaSchedule, m: usize) -> Result<Vec<Array2<f64>>> {
    sample_with_schedule(config, lambdas, &held_out_seeds(config.seed, m), config.batch)
}

/// How sample quality is measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Number of held-out batches.
    pub batches: usize,
    /// Samples per held-out batch.
    pub samples: usize,
    /// Size of the clean-data reference set.
    pub reference: usize,
    pub projections: usize,
    /// Seeds the held-out noise, the reference set and the projections.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batches: 5,
            samples: 1000,
            reference: 2000,
            projections: 128,
            seed: 2024,
        }
    }
}

/// Sliced-Wasserstein distance to clean data for each held-out batch.
pub fn evaluate(config: &DistillConfig, lambdas: &LambdaSchedule, eval: &EvalConfig) -> Result<Vec<f64>> {
    if eval.batches == 0 || eval.samples == 0 || eval.reference == 0 {
        return Err(DodeError::Config("evaluation sizes must be positive".into()));
    }
    let reference = config.oracle.sample_data(eval.reference, &mut rng(eval.seed));
    let batches = sample_with_schedule(config, lambdas, &held_out_seeds(eval.seed, eval.batches), eval.samples)?;
    batches
        .iter()
        .map(|b| sliced_wasserstein(b.view(), reference.view(), eval.projections, eval.seed))
        .collect()
}

/// [`evaluate`] for the undistilled student.
pub fn evaluate_base(config: &DistillConfig, eval: &EvalConfig) -> Result<Vec<f64>> {
    let zero = LambdaSchedule::neutral(config.student, config.formulation, config.steps);
    evaluate(config, &zero, eval)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Scale,
    Batch,
}

impl AblationAxis {
    pub fn default_values(self) -> Vec<usize> {
        match self {
            AblationAxis::Scale => vec![5, 10, 20, 30],
            AblationAxis::Batch => vec![5, 10, 50, 100],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Scale => "scale",
            AblationAxis::Batch => "batch",
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = DodeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scale" | "c" | "C" => Ok(AblationAxis::Scale),
            "batch" | "b" | "B" => Ok(AblationAxis::Batch),
            other => Err(DodeError::Config(format!("unknown ablation axis '{other}' (expected scale or batch)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: usize,
    pub mean: f64,
    pub std: f64,
    /// Metric per fitting seed (each the mean over the held-out batches).
    pub per_seed: Vec<f64>,
}

pub const ABLATION_SEEDS: usize = 3;

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Distills and evaluates once per axis value and fitting seed `seed, seed + 1, ...`.
///
/// The evaluation batches and reference set are shared by every row.
pub fn ablate(
    config: &DistillConfig,
    axis: AblationAxis,
    values: &[usize],
    seeds: usize,
    eval: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    if values.is_empty() || seeds == 0 {
        return Err(DodeError::Config("ablation needs at least one value and one seed".into()));
    }
    values
        .iter()
        .map(|&v| {
            let per_seed = (0..seeds as u64)
                .map(|k| {
                    let mut c = config.clone();
                    c.seed = config.seed.wrapping_add(k);
                    match axis {
                        AblationAxis::Scale => c.scale = v,
                        AblationAxis::Batch => c.batch = v,
                    }
                    let (lambdas, _) = distill(&c)?;
                    let m = evaluate(&c, &lambdas, eval)?;
                    Ok(m.iter().sum::<f64>() / m.len() as f64)
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean, std) = mean_std(&per_seed);
            Ok(AblationRow {
                axis,
                value: v,
                mean,
                std,
                per_seed,
            })
        })
        .collect()
}
