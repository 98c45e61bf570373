//! Run configuration: a TOML file, command-line overrides and the resolved,
//! validated form that every stage consumes.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use pcrlb_core::analysis::{ReferenceConfig, Tolerances, DEFAULT_ALPHA, DEFAULT_EPSILON, DEFAULT_RHO};
use pcrlb_core::model::registry::{self, Overrides};
use pcrlb_core::model::{InputSignal, SsmModel};
use pcrlb_core::pcrlb::HessianMethod;
use pcrlb_core::smc::{AdaSchedule, DEFAULT_PARTICLES};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "PCRLB_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

/// A scalar broadcast to every parameter, or one value per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerParam {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl PerParam {
    pub fn resolve(&self, q: usize, field: &str) -> Result<Vec<f64>> {
        match self {
            Self::Scalar(v) => Ok(vec![*v; q]),
            Self::Vector(v) if v.len() == q => Ok(v.clone()),
            Self::Vector(v) => Err(CliError::config(
                field,
                format!("has {} entries, model has {q} parameters", v.len()),
            )),
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            Self::Scalar(v) => vec![*v],
            Self::Vector(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Shrinkage {
        #[serde(default = "default_delta")]
        delta: f64,
    },
    ConstantDecay {
        #[serde(default = "default_q0")]
        q0: PerParam,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
}

fn default_delta() -> f64 {
    0.98
}

fn default_q0() -> PerParam {
    PerParam::Scalar(1e-2)
}

fn default_gamma() -> f64 {
    0.97
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::Shrinkage { delta: default_delta() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InputConfig {
    Zero,
    Prbs { amplitude: f64, hold: usize },
    Sequence { values: Vec<Vec<f64>> },
}

impl From<&InputConfig> for InputSignal {
    fn from(c: &InputConfig) -> Self {
        match c {
            InputConfig::Zero => InputSignal::Zero,
            InputConfig::Prbs { amplitude, hold } => InputSignal::Prbs {
                amplitude: *amplitude,
                hold: *hold,
            },
            InputConfig::Sequence { values } => InputSignal::Sequence(values.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianChoice {
    #[default]
    Auto,
    Analytic,
    FiniteDifference,
}

impl From<HessianChoice> for HessianMethod {
    fn from(c: HessianChoice) -> Self {
        match c {
            HessianChoice::Auto => HessianMethod::Auto,
            HessianChoice::Analytic => HessianMethod::Analytic,
            HessianChoice::FiniteDifference => HessianMethod::FiniteDifference,
        }
    }
}

/// Replacements for the registered model's noise and prior constants.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub process_variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurement_variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_variances: Option<Vec<f64>>,
}

/// The configuration file as written; every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<String>,
    pub mc_runs: Option<usize>,
    pub horizon: Option<usize>,
    pub particles: Option<usize>,
    pub identify_runs: Option<usize>,
    pub reference_multiplier: Option<usize>,
    pub reference_replicates: Option<usize>,
    pub seed: Option<u64>,
    pub epsilon: Option<PerParam>,
    pub alpha: Option<PerParam>,
    pub rho: Option<f64>,
    pub hessian: Option<HessianChoice>,
    pub schedule: Option<ScheduleConfig>,
    pub input: Option<InputConfig>,
    pub overrides: Option<ModelOverrides>,
    pub output: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl FileConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("<file>")
                .to_string();
            CliError::config(field, e.message().trim().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub model: Option<String>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub particles: Option<usize>,
    pub mc_runs: Option<usize>,
    pub horizon: Option<usize>,
}

/// Fully resolved settings. Serialized as `config.toml` in the run directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: String,
    pub mc_runs: usize,
    pub horizon: usize,
    pub particles: usize,
    pub identify_runs: usize,
    pub reference_multiplier: usize,
    pub reference_replicates: usize,
    pub seed: u64,
    pub epsilon: Vec<f64>,
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub hessian: HessianChoice,
    pub schedule: ScheduleConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<InputConfig>,
    pub overrides: ModelOverrides,
    #[serde(skip)]
    pub output: PathBuf,
    #[serde(skip)]
    pub workers: Option<usize>,
}

fn positive(value: usize, field: &str) -> Result<usize> {
    if value == 0 {
        Err(CliError::config(field, "must be positive"))
    } else {
        Ok(value)
    }
}

impl RunConfig {
    /// Merges file and flags, fills defaults and validates.
    pub fn resolve(file: FileConfig, cli: &CliOverrides) -> Result<Self> {
        let model_name = cli
            .model
            .clone()
            .or(file.model)
            .ok_or_else(|| CliError::config("model", "no model name given (set `model` or pass --model)"))?;
        if !registry::list().iter().any(|(n, _)| *n == model_name) {
            let known: Vec<_> = registry::list().iter().map(|(n, _)| *n).collect();
            return Err(CliError::config(
                "model",
                format!("unknown model '{model_name}' (known: {})", known.join(", ")),
            ));
        }
        let mc_runs = positive(cli.mc_runs.or(file.mc_runs).unwrap_or(100), "mc_runs")?;
        let horizon = positive(cli.horizon.or(file.horizon).unwrap_or(300), "horizon")?;
        let particles = positive(cli.particles.or(file.particles).unwrap_or(DEFAULT_PARTICLES), "particles")?;
        let identify_runs = positive(file.identify_runs.unwrap_or(mc_runs), "identify_runs")?;
        if identify_runs > mc_runs {
            return Err(CliError::config(
                "identify_runs",
                format!("{identify_runs} exceeds mc_runs = {mc_runs}"),
            ));
        }
        let reference_multiplier = positive(file.reference_multiplier.unwrap_or(20), "reference_multiplier")?;
        let reference_replicates = positive(file.reference_replicates.unwrap_or(5), "reference_replicates")?;
        let seed = cli.seed.or(file.seed).unwrap_or(42);
        let rho = file.rho.unwrap_or(DEFAULT_RHO);
        if !(0.0..=1.0).contains(&rho) {
            return Err(CliError::config("rho", format!("{rho} is outside [0, 1]")));
        }
        let overrides = file.overrides.unwrap_or_default();
        let workers = cli.workers.or(file.workers);
        if workers == Some(0) {
            return Err(CliError::config("workers", "must be positive"));
        }
        let output = match cli.out.clone().or(file.output) {
            Some(p) => p,
            None => {
                let root = std::env::var_os(OUTPUT_ROOT_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
                root.join(format!("{model_name}-seed{seed}"))
            }
        };
        let mut cfg = Self {
            model: model_name,
            mc_runs,
            horizon,
            particles,
            identify_runs,
            reference_multiplier,
            reference_replicates,
            seed,
            epsilon: Vec::new(),
            alpha: Vec::new(),
            rho,
            hessian: file.hessian.unwrap_or_default(),
            schedule: file.schedule.unwrap_or_default(),
            input: file.input,
            overrides,
            output,
            workers,
        };
        let model = cfg.build_model()?;
        let q = model.dims().param;
        cfg.epsilon = file
            .epsilon
            .unwrap_or(PerParam::Scalar(DEFAULT_EPSILON))
            .resolve(q, "epsilon")?;
        cfg.alpha = file
            .alpha
            .unwrap_or(PerParam::Scalar(DEFAULT_ALPHA))
            .resolve(q, "alpha")?;
        for (field, values) in [("epsilon", &cfg.epsilon), ("alpha", &cfg.alpha)] {
            if values.iter().any(|v| v.is_nan() || *v <= 0.0) {
                return Err(CliError::config(field, "entries must be positive"));
            }
        }
        cfg.schedule()?
            .validate(q)
            .map_err(|e| CliError::config("schedule", e.to_string()))?;
        model
            .inputs(horizon)
            .map_err(|e| CliError::config("input", e.to_string()))?;
        Ok(cfg)
    }

    /// Loads a file (if given) and applies the overrides.
    pub fn load(path: Option<&Path>, cli: &CliOverrides) -> Result<Self> {
        let file = match path {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        Self::resolve(file, cli)
    }

    pub fn build_model(&self) -> Result<SsmModel> {
        let o = Overrides {
            process_variance: self.overrides.process_variance,
            measurement_variance: self.overrides.measurement_variance,
            prior_mean: self.overrides.prior_mean.clone(),
            prior_variances: self.overrides.prior_variances.clone(),
            input: self.input.as_ref().map(InputSignal::from),
        };
        registry::build_with(&self.model, &o).map_err(|e| CliError::config("overrides", e.to_string()))
    }

    pub fn schedule(&self) -> Result<AdaSchedule> {
        Ok(match &self.schedule {
            ScheduleConfig::Shrinkage { delta } => AdaSchedule::Shrinkage { delta: *delta },
            ScheduleConfig::ConstantDecay { q0, gamma } => {
                let q = self.build_model()?.dims().param;
                let diag = q0.resolve(q, "schedule.q0")?;
                AdaSchedule::ConstantDecay {
                    q0: DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag)),
                    gamma: *gamma,
                }
            }
        })
    }

    pub fn tolerances(&self) -> Tolerances {
        Tolerances {
            epsilon: self.epsilon.clone(),
            alpha: self.alpha.clone(),
            rho: self.rho,
        }
    }

    pub fn reference(&self) -> Result<ReferenceConfig> {
        Ok(ReferenceConfig::scaled(
            self.particles,
            self.reference_multiplier,
            self.reference_replicates,
            self.schedule()?,
        ))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the resolved configuration; output path and worker count
    /// are excluded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Values summarizing the ADA schedule, for manifests.
    pub fn schedule_values(&self) -> Vec<f64> {
        match &self.schedule {
            ScheduleConfig::Shrinkage { delta } => vec![*delta],
            ScheduleConfig::ConstantDecay { q0, gamma } => {
                let mut v = q0.values();
                v.push(*gamma);
                v
            }
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
