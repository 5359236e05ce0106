//! Python bindings. Arrays cross the boundary as lists of rows.

use dode_core::analysis;
use dode_core::distill::{self as distill_mod, EvalConfig};
use dode_core::dode::run_d_sampler;
use dode_core::io::{lambda_schedule_from_json, lambda_schedule_to_json};
use dode_core::noise::{initial_noise, rng};
use dode_core::solvers::{run_solver, Solver};
use dode_core::{make_grid, presets, DistillConfig, DodeError, Parameterization, SolverKind, Spacing};
use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;

fn to_py(e: DodeError) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Parses a kebab-case enum name the same way the config files do.
fn parse_name<T: DeserializeOwned>(what: &str, s: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} '{s}'")))
}

fn parse_kind(s: &str) -> PyResult<SolverKind> {
    s.parse().map_err(to_py)
}

fn to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[pyclass(name = "NoiseSchedule", module = "dode", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySchedule(dode_core::NoiseSchedule);

#[pymethods]
impl PySchedule {
    #[staticmethod]
    fn vp_linear() -> Self {
        Self(dode_core::NoiseSchedule::vp_linear())
    }

    #[staticmethod]
    fn ve_karras() -> Self {
        Self(dode_core::NoiseSchedule::ve_karras())
    }

    fn alpha_sigma(&self, t: f64) -> PyResult<(f64, f64)> {
        self.0.alpha_sigma(t).map_err(to_py)
    }

    fn log_snr(&self, t: f64) -> PyResult<f64> {
        self.0.log_snr(t).map_err(to_py)
    }

    fn inv_log_snr(&self, tau: f64) -> PyResult<f64> {
        self.0.inv_log_snr(tau).map_err(to_py)
    }

    /// Decreasing timesteps `t_N, ..., t_0`.
    #[pyo3(signature = (steps, spacing = None))]
    fn grid(&self, steps: usize, spacing: Option<&str>) -> PyResult<Vec<f64>> {
        let sp = match spacing {
            Some(s) => parse_name::<Spacing>("spacing", s)?,
            None => default_spacing(&self.0),
        };
        Ok(make_grid(&self.0, steps, sp).map_err(to_py)?.points().to_vec())
    }

    #[getter]
    fn t_min(&self) -> f64 {
        self.0.t_min()
    }

    #[getter]
    fn t_max(&self) -> f64 {
        self.0.t_max()
    }

    fn __repr__(&self) -> String {
        format!("NoiseSchedule({:?})", self.0.kind())
    }
}

fn default_spacing(s: &dode_core::NoiseSchedule) -> Spacing {
    match s.kind() {
        dode_core::schedule::ScheduleKind::VpLinear => Spacing::UniformT,
        dode_core::schedule::ScheduleKind::VeKarras => Spacing::KarrasRho,
    }
}

/// Exact posterior-mean denoiser. The parameterization is chosen per solver when sampling.
#[pyclass(name = "Oracle", module = "dode", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyOracle(dode_core::DenoiserOracle);

#[pymethods]
impl PyOracle {
    #[staticmethod]
    #[pyo3(signature = (components = presets::RING_COMPONENTS, radius = presets::RING_RADIUS, std = presets::RING_STD))]
    fn gmm_ring(components: usize, radius: f64, std: f64) -> Self {
        Self(presets::gmm_ring_with(Parameterization::NoisePrediction, components, radius, std))
    }

    #[staticmethod]
    fn gaussian(mean: Vec<f64>, std: f64) -> PyResult<Self> {
        dode_core::DenoiserOracle::gaussian(Parameterization::NoisePrediction, mean, std)
            .map(Self)
            .map_err(to_py)
    }

    #[staticmethod]
    fn empirical(points: Vec<Vec<f64>>) -> PyResult<Self> {
        dode_core::DenoiserOracle::empirical(Parameterization::NoisePrediction, to_array(points)?)
            .map(Self)
            .map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn sample_data(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        to_rows(&self.0.sample_data(n, &mut rng(seed)))
    }

    /// Denoising output at time `t` in the given parameterization (`noise-prediction` or `data-prediction`).
    #[pyo3(signature = (x, t, schedule, parameterization = "noise-prediction"))]
    fn denoise(&self, x: Vec<Vec<f64>>, t: f64, schedule: &PySchedule, parameterization: &str) -> PyResult<Vec<Vec<f64>>> {
        let p: Parameterization = parse_name("parameterization", parameterization)?;
        let out = self.0.with_parameterization(p).denoise(to_array(x)?.view(), t, &schedule.0).map_err(to_py)?;
        Ok(to_rows(&out.value))
    }
}

/// Per-step weights of a distilled solver.
#[pyclass(name = "LambdaSchedule", module = "dode", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLambdas(dode_core::LambdaSchedule);

#[pymethods]
impl PyLambdas {
    #[staticmethod]
    fn zero(kind: &str, steps: usize) -> PyResult<Self> {
        Ok(Self(dode_core::LambdaSchedule::zero(parse_kind(kind)?, steps)))
    }

    #[staticmethod]
    fn fixed(kind: &str, steps: usize, value: f64) -> PyResult<Self> {
        Ok(Self(dode_core::LambdaSchedule::fixed(parse_kind(kind)?, steps, value)))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        lambda_schedule_from_json(text).map(Self).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        lambda_schedule_to_json(&self.0).map_err(to_py)
    }

    #[getter]
    fn kind(&self) -> String {
        self.0.kind.to_string()
    }

    #[getter]
    fn values(&self) -> Vec<Vec<f64>> {
        self.0.values.clone()
    }

    #[getter]
    fn n_steps(&self) -> usize {
        self.0.n_steps()
    }

    fn __repr__(&self) -> String {
        format!("LambdaSchedule(kind={}, steps={})", self.0.kind, self.0.n_steps())
    }
}

/// Runs `kind` for `steps` steps on `n` noise samples; returns a dict with `times`, `states`, `outputs`, `nfe`.
#[pyfunction]
#[pyo3(signature = (kind, schedule, oracle, steps, n, seed = 0, spacing = None, lambdas = None, record = false))]
#[allow(clippy::too_many_arguments)]
fn sample<'py>(
    py: Python<'py>,
    kind: &str,
    schedule: &PySchedule,
    oracle: &PyOracle,
    steps: usize,
    n: usize,
    seed: u64,
    spacing: Option<&str>,
    lambdas: Option<&PyLambdas>,
    record: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let kind = parse_kind(kind)?;
    let sp = match spacing {
        Some(s) => parse_name::<Spacing>("spacing", s)?,
        None => default_spacing(&schedule.0),
    };
    let s = &schedule.0;
    let o = oracle.0.with_parameterization(kind.parameterization());
    let tr = py
        .detach(|| -> dode_core::Result<_> {
            let grid = make_grid(s, steps, sp)?;
            let x = initial_noise(s, n, o.dim(), seed);
            let solver = Solver::new(kind);
            match lambdas {
                Some(l) => run_d_sampler(&solver, &o, s, &grid, x, &l.0, record),
                None => run_solver(&solver, &o, s, &grid, x, record),
            }
        })
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("times", tr.times.clone())?;
    d.set_item("states", tr.states.iter().map(to_rows).collect::<Vec<_>>())?;
    d.set_item("outputs", tr.outputs.iter().map(|o| to_rows(&o.value)).collect::<Vec<_>>())?;
    d.set_item("nfe", tr.nfe)?;
    Ok(d)
}

fn distill_config(
    kind: &str,
    schedule: &PySchedule,
    oracle: &PyOracle,
    steps: usize,
    scale: usize,
    batch: usize,
    seed: u64,
) -> PyResult<DistillConfig> {
    let mut c = DistillConfig::new(schedule.0.clone(), oracle.0.clone(), parse_kind(kind)?, steps);
    c.scale = scale;
    c.batch = batch;
    c.seed = seed;
    c.validate().map_err(to_py)?;
    Ok(c)
}

/// Fits the per-step weights; returns the schedule and the fitting log as a list of dicts.
#[pyfunction]
#[pyo3(signature = (kind, schedule, oracle, steps, scale = 10, batch = 100, seed = 0))]
fn distill<'py>(
    py: Python<'py>,
    kind: &str,
    schedule: &PySchedule,
    oracle: &PyOracle,
    steps: usize,
    scale: usize,
    batch: usize,
    seed: u64,
) -> PyResult<(PyLambdas, Vec<Bound<'py, PyDict>>)> {
    let c = distill_config(kind, schedule, oracle, steps, scale, batch, seed)?;
    let (l, report) = py.detach(|| distill_mod::distill(&c)).map_err(to_py)?;
    let rows = report
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("step", r.step)?;
            d.set_item("stage", r.stage)?;
            d.set_item("time", r.time)?;
            d.set_item("lambda", r.lambda)?;
            d.set_item("obj0", r.obj0)?;
            d.set_item("obj_star", r.obj_star)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PyLambdas(l), rows))
}

/// Sliced-Wasserstein distance of held-out batches to the data, for fitted and base weights.
#[pyfunction]
#[pyo3(signature = (kind, schedule, oracle, steps, lambdas, batches = 5, samples = 1000, seed = 2024))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    kind: &str,
    schedule: &PySchedule,
    oracle: &PyOracle,
    steps: usize,
    lambdas: &PyLambdas,
    batches: usize,
    samples: usize,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let c = distill_config(kind, schedule, oracle, steps, 10, 100, 0)?;
    let eval = EvalConfig {
        batches,
        samples,
        seed,
        ..EvalConfig::default()
    };
    py.detach(|| Ok((distill_mod::evaluate(&c, &lambdas.0, &eval)?, distill_mod::evaluate_base(&c, &eval)?)))
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (a, b, projections = analysis::DEFAULT_PROJECTIONS, seed = 0))]
fn sliced_wasserstein(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, projections: usize, seed: u64) -> PyResult<f64> {
    analysis::sliced_wasserstein(to_array(a)?.view(), to_array(b)?.view(), projections, seed).map_err(to_py)
}

#[pyfunction]
fn cosine_similarity_matrix(outputs: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
    let arrays = outputs.into_iter().map(to_array).collect::<PyResult<Vec<_>>>()?;
    Ok(to_rows(&analysis::cosine_similarity_matrix(&arrays).map_err(to_py)?.matrix))
}

#[pyfunction]
fn norm_trace(states: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<f64>> {
    let arrays = states.into_iter().map(to_array).collect::<PyResult<Vec<_>>>()?;
    Ok(analysis::norm_trace(&arrays))
}

#[pyfunction]
fn convergence_order(errors: Vec<(usize, f64)>) -> PyResult<f64> {
    analysis::convergence_order(&errors).map_err(to_py)
}

#[pymodule]
fn dode(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyOracle>()?;
    m.add_class::<PyLambdas>()?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(distill, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(sliced_wasserstein, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(norm_trace, m)?)?;
    m.add_function(wrap_pyfunction!(convergence_order, m)?)?;
    m.add("SOLVERS", SolverKind::ALL.iter().map(|k| k.to_string()).collect::<Vec<_>>())?;
    Ok(())
}
