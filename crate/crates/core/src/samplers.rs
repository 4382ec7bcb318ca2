//! Blind sampling loop, the non-blind variance-exploding reference sampler,
//! and matched-noise pairs.
//!
//! Random draws come from one [`NoiseStream`] per trajectory: sub-stream 0
//! gives the initial state, sub-stream `k + 1` the noise injected at step `k`.
//! Two samplers with the same seed therefore see identical noise at every
//! step they both take.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoisers::{residual_sigma_estimate, DenoiserSpec};
use crate::error::{config_err, Error, Result};
use crate::rng::{derive_seed, NoiseStream};
use crate::schedules::{DiffusionSchedule, ExplicitSchedule, ScheduleKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    ExpEuler,
}

/// How `a = ratio * sigma_hat^p` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptiveUnits {
    /// `a = ratio * sigma_hat^2`.
    Variance,
    /// `a = ratio * sigma_hat`.
    StdDev,
}

/// How the adaptive coefficient evolves inside one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WithinStep {
    /// `a_t = ratio sigma_t^2` with `sigma_t` following the implicit schedule
    /// from `sigma_hat_k` across the step. Only meaningful in variance units.
    Anchored,
    /// `a` held at its value at the start of the step.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Diffusion {
    /// Fixed coefficient process evaluated at `t = k h`. The blind sampler
    /// starts it from `sigma_max`, replacing the schedule's own `sigma0`.
    Schedule { schedule: DiffusionSchedule },
    /// Coefficient driven by the current noise estimate.
    Adaptive { ratio: f64, units: AdaptiveUnits, within_step: WithinStep },
}

impl Diffusion {
    pub fn none() -> Self {
        Self::Schedule { schedule: DiffusionSchedule { kind: ScheduleKind::Zero, sigma0: 1.0 } }
    }

    /// `a = ratio * sigma_hat^2`, anchored within each step.
    pub fn adaptive(ratio: f64) -> Self {
        Self::Adaptive { ratio, units: AdaptiveUnits::Variance, within_step: WithinStep::Anchored }
    }

    /// Decay rate `1 - ratio` of `log sigma` along the implicit schedule.
    fn decay_rate(&self) -> f64 {
        match self {
            Self::Schedule { schedule } => match schedule.kind {
                ScheduleKind::Proportional { ratio } => 1.0 - ratio,
                _ => 1.0,
            },
            Self::Adaptive { ratio, units: AdaptiveUnits::Variance, .. } => 1.0 - ratio,
            Self::Adaptive { .. } => 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if let Self::Adaptive { ratio, units, within_step } = self {
            if !(*ratio >= 0.0 && *ratio < 1.0) {
                return config_err(format!("adaptive ratio must lie in [0, 1), got {ratio}"));
            }
            if *units == AdaptiveUnits::StdDev && *within_step == WithinStep::Anchored {
                return config_err("anchored steps need variance units");
            }
        }
        Ok(())
    }
}

/// Noise variance injected by one step of the adaptive rule.
pub fn adaptive_noise_var(
    ratio: f64,
    units: AdaptiveUnits,
    within_step: WithinStep,
    integrator: Integrator,
    sigma_hat: f64,
    h: f64,
) -> f64 {
    match (within_step, integrator) {
        (WithinStep::Anchored, Integrator::ExpEuler) => {
            sigma_hat * sigma_hat * (-2.0 * h).exp() * (2.0 * ratio * h).exp_m1()
        }
        (WithinStep::Anchored, Integrator::Euler) => {
            -ratio * sigma_hat * sigma_hat * (-2.0 * (1.0 - ratio) * h).exp_m1() / (1.0 - ratio)
        }
        (WithinStep::Frozen, integrator) => {
            let a = match units {
                AdaptiveUnits::Variance => ratio * sigma_hat * sigma_hat,
                AdaptiveUnits::StdDev => ratio * sigma_hat,
            };
            match integrator {
                Integrator::Euler => 2.0 * a * h,
                Integrator::ExpEuler => -a * (-2.0 * h).exp_m1(),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub step_size: f64,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub integrator: Integrator,
    pub diffusion: Diffusion,
    /// Defaults to `10 ceil(log(sigma_max / sigma_min) / ((1 - ratio) h))`.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Defaults to the data mean for networks and to 0 for analytic denoisers.
    pub init_mean: Option<Vec<f64>>,
    pub record_states: bool,
}

impl SamplerConfig {
    pub fn new(step_size: f64, sigma_max: f64, sigma_min: f64, integrator: Integrator, diffusion: Diffusion, seed: u64) -> Self {
        Self {
            step_size,
            sigma_max,
            sigma_min,
            integrator,
            diffusion,
            max_steps: None,
            seed,
            init_mean: None,
            record_states: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return config_err("step size must be positive");
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return config_err(format!("need 0 < sigma_min < sigma_max, got [{}, {}]", self.sigma_min, self.sigma_max));
        }
        if self.max_steps == Some(0) {
            return config_err("max_steps must be at least 1");
        }
        self.diffusion.validate()
    }

    pub fn step_cap(&self) -> usize {
        self.max_steps.unwrap_or_else(|| {
            let n = (self.sigma_max / self.sigma_min).ln() / (self.diffusion.decay_rate() * self.step_size);
            10 * (n.ceil() as usize).max(1)
        })
    }

    fn initial_state(&self, denoiser: &DenoiserSpec, d: usize, stream: &NoiseStream) -> Result<DVector<f64>> {
        let mean = match (&self.init_mean, denoiser) {
            (Some(m), _) => {
                if m.len() != d {
                    return config_err(format!("init_mean has {} entries, expected {d}", m.len()));
                }
                DVector::from_column_slice(m)
            }
            (None, DenoiserSpec::TrainedNetwork { net }) => DVector::from_column_slice(&net.normalization().output_mean),
            (None, _) => DVector::zeros(d),
        };
        Ok(mean + stream.normal(0, d) * self.sigma_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    SigmaMinReached,
    MaxSteps,
    ScheduleCompleted,
}

/// Per-step record. Entry `k` describes the state before step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub times: Vec<f64>,
    pub sigma_hats: Vec<f64>,
    /// Noise level prescribed for the state, when the sampler has one.
    pub sigma_scheduled: Option<Vec<f64>>,
    pub state_norms: Vec<f64>,
    /// Filled only with `record_states`.
    pub states: Vec<DVector<f64>>,
    /// Unit normal draws injected at each step; filled only with `record_states`.
    pub injected: Vec<DVector<f64>>,
    /// Steps where an estimated noise level sat on its grid boundary.
    pub boundary_hits: usize,
    pub final_state: DVector<f64>,
    pub final_denoised: DVector<f64>,
    pub terminated_by: Termination,
}

impl Trajectory {
    fn start(seed: u64, scheduled: bool) -> Self {
        Self {
            seed,
            times: Vec::new(),
            sigma_hats: Vec::new(),
            sigma_scheduled: scheduled.then(Vec::new),
            state_norms: Vec::new(),
            states: Vec::new(),
            injected: Vec::new(),
            boundary_hits: 0,
            final_state: DVector::zeros(0),
            final_denoised: DVector::zeros(0),
            terminated_by: Termination::MaxSteps,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of denoiser-driven updates taken.
    pub fn n_steps(&self) -> usize {
        match self.terminated_by {
            Termination::SigmaMinReached => self.len().saturating_sub(1),
            _ => self.len(),
        }
    }

    /// CSV with columns `step, t, sigma_hat, sigma_scheduled, state_norm`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "t", "sigma_hat", "sigma_scheduled", "state_norm"])?;
        for k in 0..self.len() {
            let sched = self.sigma_scheduled.as_ref().map(|s| s[k].to_string()).unwrap_or_default();
            w.write_record([
                k.to_string(),
                self.times[k].to_string(),
                self.sigma_hats[k].to_string(),
                sched,
                self.state_norms[k].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Recorded states as little-endian row-major doubles (one row per step)
    /// at `path`, with a JSON sidecar `path.json` giving shape and seed.
    pub fn write_states(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let rows = self.states.len();
        let cols = self.states.first().map_or(0, |s| s.len());
        let mut blob = Vec::with_capacity(8 * rows * cols);
        for s in &self.states {
            for v in s.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, blob)?;
        let sidecar = serde_json::json!({
            "shape": [rows, cols],
            "dtype": "f64",
            "byte_order": "little",
            "layout": "row-major, one row per step",
            "seed": self.seed,
        });
        let mut side = path.as_os_str().to_owned();
        side.push(".json");
        std::fs::write(side, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }
}

/// Reads a state dump written by [`Trajectory::write_states`].
pub fn read_states(path: impl AsRef<Path>) -> Result<Vec<DVector<f64>>> {
    let path = path.as_ref();
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(side)?)?;
    let shape = meta["shape"].as_array().ok_or_else(|| Error::Config("state sidecar lacks shape".into()))?;
    let (rows, cols) = (shape[0].as_u64().unwrap_or(0) as usize, shape[1].as_u64().unwrap_or(0) as usize);
    let bytes = std::fs::read(path)?;
    if bytes.len() != 8 * rows * cols {
        return config_err("state dump size does not match its sidecar");
    }
    let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(vals.chunks(cols.max(1)).take(rows).map(DVector::from_column_slice).collect())
}

fn record(traj: &mut Trajectory, config: &SamplerConfig, t: f64, sigma_hat: f64, x: &DVector<f64>) {
    traj.times.push(t);
    traj.sigma_hats.push(sigma_hat);
    traj.state_norms.push(x.norm());
    if config.record_states {
        traj.states.push(x.clone());
    }
}

/// Blind sampling: denoise, estimate the residual noise level, stop once it
/// falls to `sigma_min`, otherwise take one step.
pub fn run_blind(denoiser: &DenoiserSpec, config: &SamplerConfig) -> Result<Trajectory> {
    config.validate()?;
    if !denoiser.is_blind() {
        return Err(Error::Unsupported(format!("{} cannot drive the blind sampler", denoiser.kind().name())));
    }
    let d = denoiser.ambient_dim();
    let stream = NoiseStream::new(config.seed);
    let mut x = config.initial_state(denoiser, d, &stream)?;
    let h = config.step_size;
    let cap = config.step_cap();
    let scheduled = matches!(config.diffusion, Diffusion::Schedule { .. })
        || matches!(config.diffusion, Diffusion::Adaptive { units: AdaptiveUnits::Variance, .. });
    let mut traj = Trajectory::start(config.seed, scheduled);
    let mut diffusion = config.diffusion.clone();
    if let Diffusion::Schedule { schedule } = &mut diffusion {
        schedule.sigma0 = config.sigma_max;
    }

    for k in 0..=cap {
        let t = k as f64 * h;
        let out = denoiser.denoise_blind(&x)?;
        let sigma_hat = match out.sigma_hat {
            Some(est) => {
                traj.boundary_hits += usize::from(est.at_boundary);
                est.sigma
            }
            None => residual_sigma_estimate(&out.denoised, &x, d),
        };
        if !sigma_hat.is_finite() || out.denoised.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("denoiser returned non-finite output at step {k}")));
        }
        record(&mut traj, config, t, sigma_hat, &x);
        if let Some(s) = traj.sigma_scheduled.as_mut() {
            s.push(match &diffusion {
                Diffusion::Schedule { schedule } => schedule.implicit_sigma(t)?,
                Diffusion::Adaptive { ratio, .. } => config.sigma_max * (-(1.0 - ratio) * t).exp(),
            });
        }
        if sigma_hat <= config.sigma_min {
            traj.terminated_by = Termination::SigmaMinReached;
            traj.final_state = x;
            traj.final_denoised = out.denoised;
            return Ok(traj);
        }
        if k == cap {
            traj.final_state = x;
            traj.final_denoised = out.denoised;
            break;
        }
        let noise_var = match (&diffusion, config.integrator) {
            (Diffusion::Schedule { schedule }, Integrator::ExpEuler) => schedule.exp_euler_increments(t, h)?.1,
            (Diffusion::Schedule { schedule }, Integrator::Euler) => schedule.euler_noise_var(t, h)?,
            (Diffusion::Adaptive { ratio, units, within_step }, integ) => {
                adaptive_noise_var(*ratio, *units, *within_step, integ, sigma_hat, h)
            }
        };
        let z = stream.normal(k as u64 + 1, d);
        let denoised = out.denoised;
        x = match config.integrator {
            Integrator::Euler => &x + (&denoised - &x) * h + &z * noise_var.sqrt(),
            Integrator::ExpEuler => {
                let decay = (-h).exp();
                &x * decay + &denoised * (-(-h).exp_m1()) + &z * noise_var.sqrt()
            }
        };
        if config.record_states {
            traj.injected.push(z);
        }
    }
    traj.terminated_by = Termination::MaxSteps;
    Ok(traj)
}

/// Variance-exploding reference sampler along an explicit noise sequence:
/// `X+ = X + (s_i^2 - s_{i+1}^2)(f(X, s_i) - X)/s_i^2 + N(0, (s_i^2 - s_{i+1}^2) I)`.
/// The sequence's own `sigma_max` sets the initial spread.
pub fn run_nonblind_ve(denoiser: &DenoiserSpec, schedule: &ExplicitSchedule, config: &SamplerConfig) -> Result<Trajectory> {
    if !denoiser.is_conditioned() {
        return Err(Error::Unsupported(format!("{} cannot take a noise level", denoiser.kind().name())));
    }
    let d = denoiser.ambient_dim();
    let stream = NoiseStream::new(config.seed);
    let mut init_cfg = config.clone();
    init_cfg.sigma_max = schedule.sigma_max;
    let mut x = init_cfg.initial_state(denoiser, d, &stream)?;
    let sigmas = schedule.sigmas();
    let mut traj = Trajectory::start(config.seed, true);
    let mut t = 0.0;
    for i in 0..sigmas.len() - 1 {
        let (s, next) = (sigmas[i], sigmas[i + 1]);
        let f = denoiser.denoise_nonblind(&x, s)?;
        let sigma_hat = residual_sigma_estimate(&f, &x, d);
        record(&mut traj, config, t, sigma_hat, &x);
        if let Some(v) = traj.sigma_scheduled.as_mut() {
            v.push(s);
        }
        let var = (s * s - next * next).max(0.0);
        let z = stream.normal(i as u64 + 1, d);
        x = &x + (&f - &x) * (var / (s * s)) + &z * var.sqrt();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite state at step {i}")));
        }
        if config.record_states {
            traj.injected.push(z);
        }
        t += 1.0;
    }
    let last = sigmas[sigmas.len() - 1];
    let f = denoiser.denoise_nonblind(&x, last)?;
    record(&mut traj, config, t, residual_sigma_estimate(&f, &x, d), &x);
    if let Some(v) = traj.sigma_scheduled.as_mut() {
        v.push(last);
    }
    traj.final_state = x;
    traj.final_denoised = f;
    traj.terminated_by = Termination::ScheduleCompleted;
    Ok(traj)
}

/// Either sampler, so pairs can mix them.
#[derive(Debug, Clone)]
pub enum SamplerRun<'a> {
    Blind { denoiser: &'a DenoiserSpec, config: SamplerConfig },
    NonBlind { denoiser: &'a DenoiserSpec, schedule: ExplicitSchedule, config: SamplerConfig },
}

impl SamplerRun<'_> {
    fn dim(&self) -> usize {
        match self {
            Self::Blind { denoiser, .. } | Self::NonBlind { denoiser, .. } => denoiser.ambient_dim(),
        }
    }

    fn sigma_max(&self) -> f64 {
        match self {
            Self::Blind { config, .. } => config.sigma_max,
            Self::NonBlind { schedule, .. } => schedule.sigma_max,
        }
    }

    pub fn run(&self, seed: u64) -> Result<Trajectory> {
        match self {
            Self::Blind { denoiser, config } => {
                let mut c = config.clone();
                c.seed = seed;
                run_blind(denoiser, &c)
            }
            Self::NonBlind { denoiser, schedule, config } => {
                let mut c = config.clone();
                c.seed = seed;
                run_nonblind_ve(denoiser, schedule, &c)
            }
        }
    }
}

/// Runs both samplers on the same initial draw and step-indexed noise.
pub fn matched_pair(first: &SamplerRun, second: &SamplerRun, shared_seed: u64) -> Result<(Trajectory, Trajectory)> {
    if first.dim() != second.dim() {
        return config_err("paired samplers must share the data dimension");
    }
    if first.sigma_max() != second.sigma_max() {
        return config_err("paired samplers must share sigma_max");
    }
    Ok((first.run(shared_seed)?, second.run(shared_seed)?))
}

/// `n` independent blind trajectories with seeds derived from `config.seed`.
pub fn run_blind_batch(denoiser: &DenoiserSpec, config: &SamplerConfig, n: usize) -> Result<Vec<Trajectory>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut c = config.clone();
            c.seed = derive_seed(config.seed, i);
            run_blind(denoiser, &c)
        })
        .collect()
}

/// `n` independent non-blind trajectories with seeds derived from `config.seed`.
pub fn run_nonblind_batch(denoiser: &DenoiserSpec, schedule: &ExplicitSchedule, config: &SamplerConfig, n: usize) -> Result<Vec<Trajectory>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut c = config.clone();
            c.seed = derive_seed(config.seed, i);
            run_nonblind_ve(denoiser, schedule, &c)
        })
        .collect()
}
