//! Experiment configuration read from TOML.

use std::path::{Path, PathBuf};

use dode_core::distill::{AblationAxis, EvalConfig};
use dode_core::presets;
use dode_core::schedule::ScheduleKind;
use dode_core::{DOdeFormulation, DenoiserOracle, DistillConfig, DodeError, GmmComponent, NoiseSchedule, Result, SolverKind, Spacing};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` takes precedence. Never written to the resolved copy.
    #[serde(default, skip_serializing)]
    pub output: Option<PathBuf>,
    pub schedule: NoiseSchedule,
    pub oracle: OracleConfig,
    pub solver: SolverConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub distill: DistillBlock,
    #[serde(default)]
    pub metrics: EvalConfig,
    #[serde(default)]
    pub ablate: AblateBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OracleConfig {
    GmmRing {
        #[serde(default = "ring_components")]
        components: usize,
        #[serde(default = "ring_radius")]
        radius: f64,
        #[serde(default = "ring_std")]
        std: f64,
    },
    Gaussian {
        mean: Vec<f64>,
        std: f64,
    },
    Gmm {
        components: Vec<GmmComponent>,
    },
    /// Point cloud read from a numeric CSV, one point per row.
    Empirical {
        path: PathBuf,
    },
}

fn ring_components() -> usize {
    presets::RING_COMPONENTS
}
fn ring_radius() -> f64 {
    presets::RING_RADIUS
}
fn ring_std() -> f64 {
    presets::RING_STD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub kind: SolverKind,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<Spacing>,
    #[serde(default)]
    pub formulation: DOdeFormulation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub batch: usize,
    /// Write the full trajectory, not only the endpoints.
    pub record: bool,
    /// Frozen weights to sample with; the base solver when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<PathBuf>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            batch: 1000,
            record: true,
            lambdas: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillBlock {
    pub scale: usize,
    pub batch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher: Option<SolverKind>,
    pub fit_batches: usize,
    /// Reuse previously fitted weights instead of fitting.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume_from: Option<PathBuf>,
}

impl Default for DistillBlock {
    fn default() -> Self {
        Self {
            scale: 10,
            batch: 100,
            teacher: None,
            fit_batches: 1,
            resume_from: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateBlock {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axis: Option<AblationAxis>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<usize>>,
    pub seeds: usize,
}

impl Default for AblateBlock {
    fn default() -> Self {
        Self {
            axis: None,
            values: None,
            seeds: dode_core::distill::ABLATION_SEEDS,
        }
    }
}

impl ExperimentConfig {
    /// Reads, resolves relative paths against the file's directory and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DodeError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| DodeError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let absolute = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if let Ok(c) = p.canonicalize() {
                *p = c;
            }
        };
        if let OracleConfig::Empirical { path } = &mut cfg.oracle {
            absolute(path);
        }
        cfg.sample.lambdas.as_mut().map(absolute);
        cfg.distill.resume_from.as_mut().map(absolute);
        if let Some(out) = cfg.output.as_mut() {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.solver.steps == 0 {
            return Err(DodeError::Config("solver.steps must be positive".into()));
        }
        if self.sample.batch == 0 {
            return Err(DodeError::Config("sample.batch must be positive".into()));
        }
        if self.ablate.seeds == 0 {
            return Err(DodeError::Config("ablate.seeds must be positive".into()));
        }
        let oracle = self.oracle()?;
        self.solver.kind.check_compatible(&self.schedule, &oracle.with_parameterization(self.solver.kind.parameterization()))?;
        if self.solver.spacing == Some(Spacing::Custom) {
            return Err(DodeError::Config("solver.spacing cannot be custom".into()));
        }
        if self.solver.formulation != DOdeFormulation::Standard
            && !matches!(self.solver.kind, SolverKind::DdimNoise | SolverKind::DdimData)
        {
            return Err(DodeError::Config("alternative formulations are defined on DDIM only".into()));
        }
        let m = &self.metrics;
        if m.batches == 0 || m.samples == 0 || m.reference == 0 || m.projections == 0 {
            return Err(DodeError::Config("metrics sizes must be positive".into()));
        }
        Ok(())
    }

    /// Builds the oracle in the solver's parameterization.
    pub fn oracle(&self) -> Result<DenoiserOracle> {
        let p = self.solver.kind.parameterization();
        match &self.oracle {
            OracleConfig::GmmRing { components, radius, std } => {
                if *components == 0 || !(*std > 0.0) || !radius.is_finite() {
                    return Err(DodeError::Config("gmm-ring needs components > 0 and std > 0".into()));
                }
                Ok(presets::gmm_ring_with(p, *components, *radius, *std))
            }
            OracleConfig::Gaussian { mean, std } => DenoiserOracle::gaussian(p, mean.clone(), *std),
            OracleConfig::Gmm { components } => DenoiserOracle::gmm(p, components.clone()),
            OracleConfig::Empirical { path } => {
                let points = dode_core::io::load_matrix_csv(path)
                    .map_err(|e| DodeError::Config(format!("dataset {}: {e}", path.display())))?;
                DenoiserOracle::empirical(p, points)
            }
        }
    }

    pub fn spacing(&self) -> Spacing {
        self.solver.spacing.unwrap_or(match self.schedule.kind() {
            ScheduleKind::VpLinear => Spacing::UniformT,
            ScheduleKind::VeKarras => Spacing::KarrasRho,
        })
    }

    pub fn distill_config(&self) -> Result<DistillConfig> {
        let mut c = DistillConfig::new(self.schedule.clone(), self.oracle()?, self.solver.kind, self.solver.steps);
        c.teacher = self.distill.teacher;
        c.formulation = self.solver.formulation;
        c.scale = self.distill.scale;
        c.batch = self.distill.batch;
        c.seed = self.seed;
        c.spacing = Some(self.spacing());
        c.fit_batches = self.distill.fit_batches;
        c.validate()?;
        Ok(c)
    }

    /// The resolved copy written next to every run's outputs.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DodeError::Format(e.to_string()))
    }
}
