use std::path::{Path, PathBuf};

use dode_core::analysis::{coordinate_trace, cosine_similarity_matrix, mean_row_distance, norm_trace, sliced_wasserstein, MetricReport};
use dode_core::denoiser::Backend;
use dode_core::distill::{ablate, evaluate, evaluate_base, sample_with_schedule, AblationAxis};
use dode_core::dode::run_d_sampler;
use dode_core::io::{self, TrajectoryData};
use dode_core::noise::{held_out_seeds, initial_noise, rng};
use dode_core::solvers::{run_solver, Solver};
use dode_core::{distill, make_grid, DodeError, LambdaSchedule, Result};

use crate::config::ExperimentConfig;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

fn write_resolved(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    Ok(())
}

fn load_lambdas(path: &Path, cfg: &ExperimentConfig) -> Result<LambdaSchedule> {
    let s = io::load_lambda_schedule(path).map_err(|e| DodeError::Config(format!("lambda file {}: {e}", path.display())))?;
    s.validate(cfg.solver.kind, cfg.solver.steps)?;
    Ok(s)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn with_run_meta(m: MetricReport, cfg: &ExperimentConfig) -> MetricReport {
    m.with("solver", cfg.solver.kind)
        .with("steps", cfg.solver.steps)
        .with("seed", cfg.seed)
}

pub fn sample(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    write_resolved(cfg, out)?;
    let oracle = cfg.oracle()?;
    let grid = make_grid(&cfg.schedule, cfg.solver.steps, cfg.spacing())?;
    let solver = Solver::new(cfg.solver.kind);
    let x = initial_noise(&cfg.schedule, cfg.sample.batch, oracle.dim(), cfg.seed);
    let lambdas = cfg.sample.lambdas.as_deref().map(|p| load_lambdas(p, cfg)).transpose()?;
    let tr = match &lambdas {
        Some(l) => run_d_sampler(&solver, &oracle, &cfg.schedule, &grid, x.clone(), l, cfg.sample.record)?,
        None => run_solver(&solver, &oracle, &cfg.schedule, &grid, x.clone(), cfg.sample.record)?,
    };
    io::save_batch_csv(&out.join("endpoints.csv"), tr.final_state())?;
    if tr.is_recorded() {
        let data = TrajectoryData::from_trajectory(&tr)?;
        io::save_trajectory_csv(&out.join("trajectory.csv"), &data)?;
        io::save_trajectory_bin(&out.join("trajectory.bin"), &data)?;
    }
    let m = &cfg.metrics;
    let reference = oracle.sample_data(m.reference, &mut rng(m.seed));
    let sw = sliced_wasserstein(tr.final_state().view(), reference.view(), m.projections, m.seed)?;
    let distilled = if lambdas.is_some() { "true" } else { "false" };
    let mut metrics = vec![
        with_run_meta(MetricReport::new("sliced_wasserstein_to_data", sw)?, cfg)
            .with("projections", m.projections)
            .with("reference", m.reference)
            .with("distilled", distilled),
        with_run_meta(MetricReport::new("nfe", tr.nfe as f64)?, cfg),
    ];
    if matches!(oracle.backend(), Backend::GaussianAnalytic { .. }) {
        let exact = oracle.exact_flow_map(x.view(), cfg.schedule.t_max(), cfg.schedule.t_min(), &cfg.schedule)?;
        let err = mean_row_distance(tr.final_state().view(), exact.view())?;
        metrics.push(with_run_meta(MetricReport::new("exact_flow_error", err)?, cfg).with("distilled", distilled));
    }
    io::save_metrics_csv(&out.join("metrics.csv"), &metrics)?;
    eprintln!("sample: {} samples, {} steps, {} NFE -> {}", cfg.sample.batch, cfg.solver.steps, tr.nfe, out.display());
    Ok(())
}

pub fn distill_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    write_resolved(cfg, out)?;
    let dc = cfg.distill_config()?;
    let lambdas = match &cfg.distill.resume_from {
        Some(p) => {
            let l = load_lambdas(p, cfg)?;
            eprintln!("distill: reusing weights from {}", p.display());
            l
        }
        None => {
            let (l, report) = distill(&dc)?;
            io::save_report_csv(&out.join("distill_report.csv"), &report.rows)?;
            eprintln!(
                "distill: {} rows fitted against {} x {} teacher steps in {:.3}s",
                report.rows.len(),
                report.teacher,
                report.teacher_steps,
                report.wall_time_secs
            );
            l
        }
    };
    io::save_lambda_schedule(&out.join("lambdas.json"), &lambdas)?;

    let eval = &cfg.metrics;
    let first = sample_with_schedule(&dc, &lambdas, &held_out_seeds(eval.seed, 1), eval.samples)?;
    io::save_batch_csv(&out.join("endpoints.csv"), &first[0])?;
    let fitted = evaluate(&dc, &lambdas, eval)?;
    let base = evaluate_base(&dc, eval)?;
    let meta = |m: MetricReport| {
        with_run_meta(m, cfg)
            .with("scale", dc.scale)
            .with("batch", dc.batch)
            .with("teacher", dc.resolve_teacher())
            .with("eval_seed", eval.seed)
            .with("eval_samples", eval.samples)
    };
    let mut metrics = Vec::new();
    for (k, (f, b)) in fitted.iter().zip(&base).enumerate() {
        metrics.push(meta(MetricReport::new("sw_distilled", *f)?).with("held_out", k));
        metrics.push(meta(MetricReport::new("sw_base", *b)?).with("held_out", k));
    }
    metrics.push(meta(MetricReport::new("sw_distilled_mean", mean(&fitted))?));
    metrics.push(meta(MetricReport::new("sw_base_mean", mean(&base))?));
    let wins = fitted.iter().zip(&base).filter(|(f, b)| f <= b).count();
    metrics.push(meta(MetricReport::new("held_out_wins", wins as f64)?).with("batches", fitted.len()));
    io::save_metrics_csv(&out.join("metrics.csv"), &metrics)?;
    eprintln!("distill: mean SW {:.5} (base {:.5}), {wins}/{} held-out wins", mean(&fitted), mean(&base), fitted.len());
    Ok(())
}

pub fn ablate_cmd(cfg: &ExperimentConfig, axis: Option<&str>, out: &Path) -> Result<()> {
    let axis: AblationAxis = match axis {
        Some(a) => a.parse()?,
        None => cfg
            .ablate
            .axis
            .ok_or_else(|| DodeError::Config("ablate needs --axis or ablate.axis".into()))?,
    };
    let mut resolved = cfg.clone();
    resolved.ablate.axis = Some(axis);
    write_resolved(&resolved, out)?;
    let values = cfg.ablate.values.clone().unwrap_or_else(|| axis.default_values());
    let rows = ablate(&cfg.distill_config()?, axis, &values, cfg.ablate.seeds, &cfg.metrics)?;
    io::save_ablation_csv(&out.join(format!("ablation_{}.csv", axis.name())), &rows)?;
    for r in &rows {
        eprintln!("ablate {}={}: {:.5} +/- {:.5}", axis.name(), r.value, r.mean, r.std);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Cosine,
    Norm,
    Coords,
    All,
}

impl std::str::FromStr for Which {
    type Err = DodeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Which::Cosine),
            "norm" => Ok(Which::Norm),
            "coords" => Ok(Which::Coords),
            "all" => Ok(Which::All),
            o => Err(DodeError::Config(format!("unknown analysis '{o}' (cosine, norm, coords, all)"))),
        }
    }
}

pub fn analyze(trajectory: &Path, which: Which, sample: usize, coords: Option<(usize, usize)>, out: Option<PathBuf>) -> Result<()> {
    if !trajectory.is_file() {
        return Err(DodeError::Config(format!("trajectory {} not found", trajectory.display())));
    }
    let data = io::load_trajectory(trajectory)?;
    let out = out.unwrap_or_else(|| trajectory.parent().map(Path::to_path_buf).unwrap_or_default());
    std::fs::create_dir_all(&out)?;
    let steps: Vec<f64> = (0..data.times.len()).map(|i| i as f64).collect();
    if matches!(which, Which::Cosine | Which::All) {
        if data.outputs.is_empty() {
            return Err(DodeError::Config("trajectory has no denoising outputs".into()));
        }
        let m = cosine_similarity_matrix(&data.outputs)?;
        if m.zero_norm {
            eprintln!("analyze: warning: zero-norm outputs present, their cosines count as 0");
        }
        io::save_matrix_csv(&out.join("cosine.csv"), &m.matrix)?;
    }
    if matches!(which, Which::Norm | Which::All) {
        io::save_series_csv(
            &out.join("norm.csv"),
            &[("step", steps.clone()), ("time", data.times.clone()), ("norm", norm_trace(&data.states))],
        )?;
    }
    if matches!(which, Which::Coords | Which::All) {
        let dim = data.dim().1;
        let pair = coords.unwrap_or((0, 1.min(dim - 1)));
        let path = coordinate_trace(&data.states, sample, pair).map_err(|e| DodeError::Config(e.to_string()))?;
        io::save_series_csv(
            &out.join("coords.csv"),
            &[
                ("step", steps),
                ("time", data.times.clone()),
                ("first", path.iter().map(|p| p.0).collect()),
                ("second", path.iter().map(|p| p.1).collect()),
            ],
        )?;
    }
    eprintln!("analyze: {} states -> {}", data.times.len(), out.display());
    Ok(())
}
