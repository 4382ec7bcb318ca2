//! Experiment configuration files and the built-in presets.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use bddm_core::nn::load_network;
use bddm_core::samplers::{AdaptiveUnits, WithinStep};
use bddm_core::schedules::{ExplicitKind, ScheduleKind};
use bddm_core::{
    models, DenoiserSpec, Diffusion, DiffusionSchedule, ExplicitSchedule, GaussianMixture, Integrator, NoisePrior,
    SamplerConfig, SigmaGrid,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::CliError;

/// Where the data model comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    TwoGaussians { ambient_dim: usize },
    CorrelatedGaussian { ambient_dim: usize },
    File { path: PathBuf },
}

impl ModelSpec {
    pub fn load(&self) -> Result<GaussianMixture, CliError> {
        match self {
            Self::TwoGaussians { ambient_dim } => Ok(models::two_gaussians(*ambient_dim)?),
            Self::CorrelatedGaussian { ambient_dim } => Ok(models::correlated_gaussian(*ambient_dim)?),
            Self::File { path } => GaussianMixture::load(path)
                .map_err(|e| CliError::Config(format!("cannot load model {}: {e}", path.display()))),
        }
    }

    /// Short file-name tag such as `d500`.
    pub fn tag(&self, model: &GaussianMixture) -> String {
        match self {
            Self::File { path } => {
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                format!("{stem}_d{}", model.ambient_dim())
            }
            _ => format!("d{}", model.ambient_dim()),
        }
    }
}

/// `Theta(sigma) ∝ sigma^(alpha - 3)` on `[sigma_min, sigma_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub alpha: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl PriorSpec {
    pub fn build(&self) -> Result<NoisePrior, CliError> {
        Ok(NoisePrior::new(self.alpha, self.sigma_min, self.sigma_max)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DenoiserChoice {
    BlindMle { prior: PriorSpec, grid_nodes: usize },
    BlindPosterior { prior: PriorSpec, grid_nodes: usize },
    Network { bundle: PathBuf },
}

impl DenoiserChoice {
    pub fn build(&self, model: &Arc<GaussianMixture>) -> Result<DenoiserSpec, CliError> {
        let spec = match self {
            Self::BlindMle { prior, grid_nodes } => {
                let p = prior.build()?;
                DenoiserSpec::blind_mle(model.clone(), p, SigmaGrid::for_prior(&p, *grid_nodes)?)
            }
            Self::BlindPosterior { prior, grid_nodes } => {
                let p = prior.build()?;
                DenoiserSpec::blind_posterior(model.clone(), p, SigmaGrid::for_prior(&p, *grid_nodes)?)
            }
            Self::Network { bundle } => {
                let net = load_network(bundle)
                    .map_err(|e| CliError::Config(format!("cannot load network {}: {e}", bundle.display())))?;
                DenoiserSpec::network(Arc::new(net))
            }
        };
        if spec.ambient_dim() != model.ambient_dim() {
            return Err(CliError::Config(format!(
                "denoiser works in dimension {}, model in {}",
                spec.ambient_dim(),
                model.ambient_dim()
            )));
        }
        Ok(spec)
    }
}

fn default_units() -> AdaptiveUnits {
    AdaptiveUnits::Variance
}

fn default_within_step() -> WithinStep {
    WithinStep::Anchored
}

/// Diffusion coefficient of the blind sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionSpec {
    /// `a = 0`.
    None,
    /// `a = ratio sigma_hat^2` (or `ratio sigma_hat` in std-dev units).
    Adaptive {
        ratio: f64,
        #[serde(default = "default_units")]
        units: AdaptiveUnits,
        #[serde(default = "default_within_step")]
        within_step: WithinStep,
    },
    Constant { a: f64 },
    Proportional { ratio: f64 },
}

impl DiffusionSpec {
    pub fn build(&self, sigma_max: f64) -> Result<Diffusion, CliError> {
        Ok(match self {
            Self::None => Diffusion::none(),
            Self::Adaptive { ratio, units, within_step } => {
                Diffusion::Adaptive { ratio: *ratio, units: *units, within_step: *within_step }
            }
            Self::Constant { a } => Diffusion::Schedule { schedule: DiffusionSchedule::constant(*a, sigma_max)? },
            Self::Proportional { ratio } => {
                Diffusion::Schedule { schedule: DiffusionSchedule::proportional(*ratio, sigma_max)? }
            }
        })
    }

    /// Noise level the continuous-time process would have at time `t`
    /// started from `sigma_max`; `None` when it has no closed form.
    pub fn implicit_sigma(&self, sigma_max: f64, t: f64) -> Option<f64> {
        let schedule = match self {
            Self::None => DiffusionSchedule::zero(sigma_max),
            Self::Adaptive { ratio, units: AdaptiveUnits::Variance, .. } | Self::Proportional { ratio } => {
                DiffusionSchedule::new(ScheduleKind::Proportional { ratio: *ratio }, sigma_max)
            }
            Self::Adaptive { .. } => return None,
            Self::Constant { a } => DiffusionSchedule::constant(*a, sigma_max),
        };
        schedule.and_then(|s| s.implicit_sigma(t)).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlindSampler {
    pub step_size: f64,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub integrator: Integrator,
    pub diffusion: DiffusionSpec,
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl BlindSampler {
    pub fn build(&self, seed: u64) -> Result<SamplerConfig, CliError> {
        let mut cfg = SamplerConfig::new(
            self.step_size,
            self.sigma_max,
            self.sigma_min,
            self.integrator,
            self.diffusion.build(self.sigma_max)?,
            seed,
        );
        cfg.max_steps = self.max_steps;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    LogSigma { n_steps: usize },
    PowerLaw { rho: f64, n_steps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonBlindSampler {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub schedule: ScheduleSpec,
}

impl NonBlindSampler {
    pub fn build(&self, seed: u64) -> Result<(ExplicitSchedule, SamplerConfig), CliError> {
        let (kind, n) = match self.schedule {
            ScheduleSpec::LogSigma { n_steps } => (ExplicitKind::LogSigma, n_steps),
            ScheduleSpec::PowerLaw { rho, n_steps } => (ExplicitKind::PowerLaw { rho }, n_steps),
        };
        let schedule = ExplicitSchedule::new(kind, n, self.sigma_min, self.sigma_max)?;
        // Step size and integrator are unused by the explicit-schedule sampler.
        let cfg = SamplerConfig::new(1.0, self.sigma_max, self.sigma_min, Integrator::Euler, Diffusion::none(), seed);
        Ok((schedule, cfg))
    }
}

/// One side of a paired comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sampler", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplerSide {
    Blind { denoiser: DenoiserChoice, settings: BlindSampler },
    NonBlind { settings: NonBlindSampler },
}

impl SamplerSide {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Blind { .. } => "blind",
            Self::NonBlind { .. } => "non_blind",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MleHistConfig {
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub models: Vec<ModelSpec>,
    pub sigma_star: f64,
    pub n_draws: usize,
    pub prior: PriorSpec,
    pub grid_nodes: usize,
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub models: Vec<ModelSpec>,
    pub denoiser: DenoiserChoice,
    pub sampler: BlindSampler,
    pub n_samples: usize,
    /// Mahalanobis radius counted as a hit on a component.
    pub hit_radius: f64,
    /// Trajectories written to the per-step CSV.
    pub logged_trajectories: usize,
    #[serde(default)]
    pub dump_states: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonBlindReference {
    pub sampler: NonBlindSampler,
    pub n_seeds: usize,
    /// Inclusive step range summarised in the report.
    pub mid_steps: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackScheduleConfig {
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub model: ModelSpec,
    pub denoiser: DenoiserChoice,
    pub sampler: BlindSampler,
    pub n_trajectories: usize,
    #[serde(default)]
    pub non_blind: Option<NonBlindReference>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MismatchConfig {
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub model: ModelSpec,
    pub sigma_stars: Vec<f64>,
    /// The sweep is `sigma_star 10^(i / points_per_decade)` for
    /// `|i| <= half_width`.
    pub points_per_decade: usize,
    pub half_width: usize,
    pub n_draws: usize,
    /// Draws for the check at the true level against the Bayes risk.
    pub oracle_draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Evaluation {
    pub sigmas: Vec<f64>,
    pub n_draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub model: ModelSpec,
    pub hidden: Vec<usize>,
    pub conditioned: bool,
    /// Total optimizer steps, including those already in a resumed bundle.
    pub n_steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub prior: PriorSpec,
    pub log_every: u64,
    #[serde(default)]
    pub resume_from: Option<PathBuf>,
    #[serde(default)]
    pub evaluate: Option<Evaluation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub model: ModelSpec,
    pub first: SamplerSide,
    pub second: SamplerSide,
    pub n_seeds: usize,
    pub n_samples: usize,
}

/// Parses a config file, mapping syntax and schema problems to config errors.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}

pub fn from_value<T: DeserializeOwned>(value: serde_json::Value) -> Result<T, CliError> {
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("invalid config: {e}")))
}

/// Named configurations mirroring the reference experiments.
pub struct Preset {
    pub name: &'static str,
    pub command: &'static str,
    pub about: &'static str,
    pub config: fn() -> serde_json::Value,
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "mle-dimension-contrast",
        command: "mle-hist",
        about: "MLE noise estimates at sigma = 0.5 for k = 2, d in {2, 500}",
        config: mle_dimension_contrast,
    },
    Preset {
        name: "two-component-sampling",
        command: "sample",
        about: "blind-MLE Euler sampling, h = 0.3, no injected noise, d in {2, 500}",
        config: two_component_sampling,
    },
    Preset {
        name: "gaussian-adaptive-sampling",
        command: "sample",
        about: "exp-Euler with a = sigma_hat^2 / 2, h = 0.5, Gaussian data, d in {2, 100}",
        config: gaussian_adaptive_sampling,
    },
    Preset {
        name: "implicit-schedule-tracking",
        command: "track-schedule",
        about: "blind tracking at a = 1/2, h = 0.5, plus the log-sigma non-blind reference",
        config: implicit_schedule_tracking,
    },
    Preset {
        name: "noise-level-mismatch",
        command: "mismatch",
        about: "non-blind denoising error against a misstated noise level",
        config: noise_level_mismatch,
    },
    Preset {
        name: "gaussian-network",
        command: "train",
        about: "short blind training run on k = 2, d = 100 Gaussian data",
        config: gaussian_network,
    },
    Preset {
        name: "blind-vs-scheduled",
        command: "compare",
        about: "matched-noise blind (a = 1/2, h = 0.2) against log-sigma non-blind sampling",
        config: blind_vs_scheduled,
    },
];

pub fn preset(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

fn mle_prior() -> serde_json::Value {
    json!({ "alpha": 3.0, "sigma_min": 0.01, "sigma_max": 10.0 })
}

fn mle_dimension_contrast() -> serde_json::Value {
    json!({
        "seed": 0,
        "models": [
            { "source": "two_gaussians", "ambient_dim": 2 },
            { "source": "two_gaussians", "ambient_dim": 500 }
        ],
        "sigma_star": 0.5,
        "n_draws": 1000,
        "prior": mle_prior(),
        "grid_nodes": 256,
        "bins": 40
    })
}

fn two_component_sampling() -> serde_json::Value {
    json!({
        "seed": 0,
        "models": [
            { "source": "two_gaussians", "ambient_dim": 2 },
            { "source": "two_gaussians", "ambient_dim": 500 }
        ],
        "denoiser": { "kind": "blind_mle", "prior": { "alpha": 3.0, "sigma_min": 0.005, "sigma_max": 10.0 }, "grid_nodes": 256 },
        "sampler": {
            "step_size": 0.3, "sigma_max": 4.0, "sigma_min": 0.01,
            "integrator": "euler", "diffusion": { "mode": "none" }
        },
        "n_samples": 512,
        "hit_radius": 3.0,
        "logged_trajectories": 8
    })
}

fn gaussian_adaptive_sampling() -> serde_json::Value {
    json!({
        "seed": 0,
        "models": [
            { "source": "correlated_gaussian", "ambient_dim": 2 },
            { "source": "correlated_gaussian", "ambient_dim": 100 }
        ],
        "denoiser": { "kind": "blind_mle", "prior": { "alpha": 3.0, "sigma_min": 0.005, "sigma_max": 10.0 }, "grid_nodes": 256 },
        "sampler": {
            "step_size": 0.5, "sigma_max": 4.0, "sigma_min": 0.05,
            "integrator": "exp_euler", "diffusion": { "mode": "adaptive", "ratio": 0.5 }
        },
        "n_samples": 512,
        "hit_radius": 3.0,
        "logged_trajectories": 8
    })
}

fn implicit_schedule_tracking() -> serde_json::Value {
    json!({
        "seed": 0,
        "model": { "source": "two_gaussians", "ambient_dim": 500 },
        "denoiser": { "kind": "blind_mle", "prior": { "alpha": 3.0, "sigma_min": 0.005, "sigma_max": 10.0 }, "grid_nodes": 256 },
        "sampler": {
            "step_size": 0.5, "sigma_max": 4.0, "sigma_min": 0.05,
            "integrator": "exp_euler", "diffusion": { "mode": "adaptive", "ratio": 0.5 }
        },
        "n_trajectories": 100,
        "non_blind": {
            "sampler": { "sigma_max": 4.0, "sigma_min": 0.05, "schedule": { "kind": "log_sigma", "n_steps": 100 } },
            "n_seeds": 5,
            "mid_steps": [10, 90]
        }
    })
}

fn noise_level_mismatch() -> serde_json::Value {
    json!({
        "seed": 0,
        "model": { "source": "two_gaussians", "ambient_dim": 500 },
        "sigma_stars": [0.025, 0.15, 0.6],
        "points_per_decade": 10,
        "half_width": 10,
        "n_draws": 40000,
        "oracle_draws": 50000
    })
}

fn gaussian_network() -> serde_json::Value {
    json!({
        "seed": 0,
        "model": { "source": "correlated_gaussian", "ambient_dim": 100 },
        "hidden": [128, 128, 128],
        "conditioned": false,
        "n_steps": 500,
        "batch_size": 512,
        "learning_rate": 1e-3,
        "weight_decay": 0.0,
        "prior": { "alpha": 2.0, "sigma_min": 0.01, "sigma_max": 10.0 },
        "log_every": 100,
        "evaluate": { "sigmas": [0.1, 0.5, 1.0], "n_draws": 1000 }
    })
}

fn blind_vs_scheduled() -> serde_json::Value {
    json!({
        "seed": 0,
        "model": { "source": "two_gaussians", "ambient_dim": 500 },
        "first": {
            "sampler": "blind",
            "denoiser": { "kind": "blind_mle", "prior": { "alpha": 3.0, "sigma_min": 0.005, "sigma_max": 10.0 }, "grid_nodes": 256 },
            "settings": {
                "step_size": 0.2, "sigma_max": 4.0, "sigma_min": 0.05,
                "integrator": "exp_euler", "diffusion": { "mode": "adaptive", "ratio": 0.5 }
            }
        },
        "second": {
            "sampler": "non_blind",
            "settings": { "sigma_max": 4.0, "sigma_min": 0.05, "schedule": { "kind": "log_sigma", "n_steps": 44 } }
        },
        "n_seeds": 5,
        "n_samples": 256
    })
}
