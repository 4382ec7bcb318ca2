//! One function per command. Each writes its artifacts through an
//! [`Output`] and returns the summary it also stores as `summary.json`.

use std::sync::Arc;

use bddm_core::metrics::{component_hits, projected_w1, Estimate};
use bddm_core::nn::{train_blind, Trainer};
use bddm_core::noise_posterior::mle_sigma;
use bddm_core::rng::derive_seed;
use bddm_core::samplers::{matched_pair, run_blind, run_blind_batch, run_nonblind_batch, SamplerRun, Termination};
use bddm_core::{DenoiserSpec, DenseNet, GaussianMixture, NoiseStream, SigmaGrid, TrainConfig, Trajectory};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{
    CompareConfig, MismatchConfig, MleHistConfig, SampleConfig, SamplerSide, TrackScheduleConfig, TrainCommandConfig,
};
use crate::svg::{Axis, Plot};
use crate::{num, CliError, Output};

/// `n` noisy observations `x + sigma z` with clean draws and noise from
/// independent streams of `seed`.
pub fn noisy_pairs(m: &GaussianMixture, sigma: f64, n: usize, seed: u64) -> Vec<(DVector<f64>, DVector<f64>)> {
    let stream = NoiseStream::new(derive_seed(seed, 1));
    m.sample(n, derive_seed(seed, 0))
        .into_iter()
        .enumerate()
        .map(|(i, x)| {
            let y = &x + stream.normal(i as u64, m.ambient_dim()) * sigma;
            (x, y)
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn check_positive(what: &str, n: usize) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Config(format!("{what} must be positive")));
    }
    Ok(())
}

// ---------------------------------------------------------------- mle-hist

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MleRun {
    pub tag: String,
    pub ambient_dim: usize,
    pub relative_rmse: f64,
    pub mean: f64,
    pub std_dev: f64,
    pub boundary_hits: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MleHistSummary {
    pub sigma_star: f64,
    pub runs: Vec<MleRun>,
    /// Largest over smallest relative RMSE across the runs.
    pub rmse_ratio: f64,
}

pub fn mle_hist(cfg: &MleHistConfig, out: &Output) -> Result<MleHistSummary, CliError> {
    check_positive("n_draws", cfg.n_draws)?;
    check_positive("bins", cfg.bins)?;
    if cfg.models.is_empty() {
        return Err(CliError::Config("at least one model is required".into()));
    }
    let prior = cfg.prior.build()?;
    if !prior.contains(cfg.sigma_star) {
        return Err(CliError::Config("sigma_star lies outside the prior support".into()));
    }
    let grid = SigmaGrid::for_prior(&prior, cfg.grid_nodes)?;
    let mut plot = Plot::new("Noise level estimates", "estimated sigma", "density");
    plot.marker(cfg.sigma_star);
    let mut runs = Vec::new();
    for (mi, spec) in cfg.models.iter().enumerate() {
        let m = spec.load()?;
        let tag = spec.tag(&m);
        let pairs = noisy_pairs(&m, cfg.sigma_star, cfg.n_draws, derive_seed(cfg.seed, mi as u64));
        let est = pairs
            .par_iter()
            .map(|(_, y)| mle_sigma(&m, &prior, y, &grid))
            .collect::<Result<Vec<_>, _>>()?;
        let vals: Vec<f64> = est.iter().map(|e| e.sigma).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mse = vals.iter().map(|v| (v - cfg.sigma_star).powi(2)).sum::<f64>() / n;

        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bins = if hi > lo { cfg.bins } else { 1 };
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for v in &vals {
            let b = if width > 0.0 { (((v - lo) / width) as usize).min(bins - 1) } else { 0 };
            counts[b] += 1;
        }
        let edges: Vec<(f64, f64)> = (0..bins)
            .map(|b| (lo + b as f64 * width, if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width }))
            .collect();
        let rows: Vec<Vec<String>> =
            edges.iter().zip(&counts).map(|((l, r), c)| vec![num(*l), num(*r), c.to_string()]).collect();
        out.table(&format!("mle_hist_{tag}.csv"), &["bin_left", "bin_right", "count"], &rows)?;
        let density = edges
            .iter()
            .zip(&counts)
            .map(|((l, r), c)| (*l, *r, if r > l { *c as f64 / (n * (r - l)) } else { *c as f64 }))
            .collect();
        plot.bars(&tag, density);
        runs.push(MleRun {
            tag,
            ambient_dim: m.ambient_dim(),
            relative_rmse: mse.sqrt() / cfg.sigma_star,
            mean,
            std_dev: var.sqrt(),
            boundary_hits: est.iter().filter(|e| e.at_boundary).count(),
        });
    }
    out.plot("mle_hist.svg", &plot)?;
    let rmse: Vec<f64> = runs.iter().map(|r| r.relative_rmse).collect();
    let top = rmse.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bottom = rmse.iter().copied().fold(f64::INFINITY, f64::min);
    let summary = MleHistSummary { sigma_star: cfg.sigma_star, runs, rmse_ratio: top / bottom };
    out.json("summary.json", &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------- sample

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRun {
    pub tag: String,
    pub ambient_dim: usize,
    pub w1: f64,
    pub w1_capped: f64,
    /// W1 between two independent data draws of the same size.
    pub baseline_w1: f64,
    pub baseline_w1_capped: f64,
    pub w1_over_baseline: f64,
    /// Per component, then misses.
    pub hits: Vec<usize>,
    /// Share of each component among the hits.
    pub hit_shares: Vec<f64>,
    pub mean_steps: f64,
    pub reached_sigma_min: usize,
    pub hit_max_steps: usize,
    pub boundary_hits: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSummary {
    pub runs: Vec<SampleRun>,
}

fn sample_row(i: usize, coords: &DVector<f64>, extra: &[String]) -> Vec<String> {
    let mut r = vec![i.to_string()];
    r.extend(coords.iter().map(|v| num(*v)));
    r.extend_from_slice(extra);
    r
}

fn plane(coords: &DVector<f64>) -> (f64, f64) {
    (coords[0], if coords.len() > 1 { coords[1] } else { 0.0 })
}

/// Per-step CSV rows `trajectory, step, t, sigma_hat, state_norm`.
fn trajectory_rows(trajs: &[Trajectory], limit: usize) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (i, t) in trajs.iter().take(limit).enumerate() {
        for k in 0..t.len() {
            rows.push(vec![i.to_string(), k.to_string(), num(t.times[k]), num(t.sigma_hats[k]), num(t.state_norms[k])]);
        }
    }
    rows
}

pub fn sample(cfg: &SampleConfig, out: &Output) -> Result<SampleSummary, CliError> {
    check_positive("n_samples", cfg.n_samples)?;
    if cfg.models.is_empty() {
        return Err(CliError::Config("at least one model is required".into()));
    }
    let mut runs = Vec::new();
    for (mi, spec) in cfg.models.iter().enumerate() {
        let m = Arc::new(spec.load()?);
        let tag = spec.tag(&m);
        let den = cfg.denoiser.build(&m)?;
        let run_seed = derive_seed(cfg.seed, mi as u64);
        let sampler = cfg.sampler.build(run_seed)?;
        let trajs = run_blind_batch(&den, &sampler, cfg.n_samples)?;
        if cfg.dump_states {
            let mut first = sampler.clone();
            first.seed = derive_seed(run_seed, 0);
            first.record_states = true;
            run_blind(&den, &first)?.write_states(out.path(&format!("states_{tag}.bin")))?;
        }
        out.table(
            &format!("trajectories_{tag}.csv"),
            &["trajectory", "step", "t", "sigma_hat", "state_norm"],
            &trajectory_rows(&trajs, cfg.logged_trajectories),
        )?;

        let support = m.support();
        let k = support.intrinsic_dim();
        let samples: Vec<DVector<f64>> = trajs.iter().map(|t| t.final_state.clone()).collect();
        let fresh = m.sample(cfg.n_samples, derive_seed(run_seed, 1_000_001));
        let other = m.sample(cfg.n_samples, derive_seed(run_seed, 1_000_002));
        let w = projected_w1(&samples, &fresh, &support, run_seed)?;
        let base = projected_w1(&other, &fresh, &support, run_seed)?;
        let hits = component_hits(&m, &samples, cfg.hit_radius)?;
        let total_hits: usize = hits[..hits.len() - 1].iter().sum();
        let hit_shares = hits[..hits.len() - 1]
            .iter()
            .map(|h| if total_hits > 0 { *h as f64 / total_hits as f64 } else { 0.0 })
            .collect();

        let mut header: Vec<String> = vec!["index".into()];
        header.extend((0..k).map(|j| format!("c{j}")));
        header.extend(["steps".into(), "termination".into()]);
        let header_ref: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let coords: Vec<DVector<f64>> = samples.iter().map(|x| support.coordinates(x)).collect();
        let rows: Vec<Vec<String>> = coords
            .iter()
            .zip(&trajs)
            .enumerate()
            .map(|(i, (c, t))| {
                let term = serde_json::to_value(t.terminated_by).ok().and_then(|v| v.as_str().map(String::from));
                sample_row(i, c, &[t.len().to_string(), term.unwrap_or_default()])
            })
            .collect();
        out.table(&format!("samples_{tag}.csv"), &header_ref, &rows)?;

        let mut plot = Plot::new(&format!("Samples in support coordinates ({tag})"), "c0", "c1");
        plot.scatter("data", fresh.iter().map(|x| plane(&support.coordinates(x))).collect());
        plot.scatter("samples", coords.iter().map(plane).collect());
        out.plot(&format!("scatter_{tag}.svg"), &plot)?;

        runs.push(SampleRun {
            tag,
            ambient_dim: m.ambient_dim(),
            w1: w.raw,
            w1_capped: w.capped,
            baseline_w1: base.raw,
            baseline_w1_capped: base.capped,
            w1_over_baseline: w.raw / base.raw,
            hits,
            hit_shares,
            mean_steps: trajs.iter().map(|t| t.len() as f64).sum::<f64>() / trajs.len() as f64,
            reached_sigma_min: trajs.iter().filter(|t| t.terminated_by == Termination::SigmaMinReached).count(),
            hit_max_steps: trajs.iter().filter(|t| t.terminated_by == Termination::MaxSteps).count(),
            boundary_hits: trajs.iter().map(|t| t.boundary_hits).sum(),
        });
    }
    let summary = SampleSummary { runs };
    out.json("summary.json", &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------- track-schedule

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackSummary {
    pub n_trajectories: usize,
    /// Steps at which at least half the trajectories still had
    /// `sigma_hat >= 2 sigma_min`.
    pub steps_checked: usize,
    /// Largest over those steps of the median relative gap to the implicit schedule.
    pub worst_step_median_gap: Option<f64>,
    pub pooled_median_gap: Option<f64>,
    pub non_blind: Option<NonBlindTrack>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonBlindTrack {
    pub mid_steps: [usize; 2],
    /// Steps in the range where the residual estimate exceeds the schedule, per seed.
    pub behind_counts: Vec<usize>,
    pub steps_per_seed: usize,
    pub pooled_fraction_behind: f64,
}

pub fn track_schedule(cfg: &TrackScheduleConfig, out: &Output) -> Result<TrackSummary, CliError> {
    check_positive("n_trajectories", cfg.n_trajectories)?;
    let m = Arc::new(cfg.model.load()?);
    let den = cfg.denoiser.build(&m)?;
    if !den.is_blind() {
        return Err(CliError::Config("schedule tracking needs a blind denoiser".into()));
    }
    let s = &cfg.sampler;
    let trajs = run_blind_batch(&den, &s.build(derive_seed(cfg.seed, 0))?, cfg.n_trajectories)?;

    let floor = 2.0 * s.sigma_min;
    let mut rows = Vec::new();
    let longest = trajs.iter().map(|t| t.len()).max().unwrap_or(0);
    let mut per_step: Vec<Vec<f64>> = vec![Vec::new(); longest];
    for (i, t) in trajs.iter().enumerate() {
        for k in 0..t.len() {
            let implicit = s.diffusion.implicit_sigma(s.sigma_max, t.times[k]);
            let gap = implicit.map(|v| (t.sigma_hats[k] - v).abs() / v);
            if let Some(g) = gap.filter(|_| t.sigma_hats[k] >= floor) {
                per_step[k].push(g);
            }
            rows.push(vec![
                i.to_string(),
                k.to_string(),
                num(t.times[k]),
                num(t.sigma_hats[k]),
                implicit.map(num).unwrap_or_default(),
                gap.map(num).unwrap_or_default(),
            ]);
        }
    }
    out.table(
        "track_blind.csv",
        &["trajectory", "step", "t", "sigma_hat", "sigma_implicit", "relative_gap"],
        &rows,
    )?;
    let checked: Vec<&Vec<f64>> = per_step.iter().filter(|g| 2 * g.len() >= trajs.len()).collect();
    let medians: Vec<f64> = checked.iter().map(|g| median(g.to_vec())).collect();
    let pooled: Vec<f64> = checked.iter().flat_map(|g| g.iter().copied()).collect();

    let mut plot = Plot::new("Estimated noise level", "step", "sigma").axes(Axis::Linear, Axis::Log);
    let med_hat: Vec<(f64, f64)> = (0..longest)
        .filter_map(|k| {
            let v: Vec<f64> = trajs.iter().filter(|t| k < t.len()).map(|t| t.sigma_hats[k]).collect();
            (2 * v.len() >= trajs.len()).then(|| (k as f64, median(v)))
        })
        .collect();
    let implicit: Vec<(f64, f64)> = (0..longest)
        .filter_map(|k| s.diffusion.implicit_sigma(s.sigma_max, k as f64 * s.step_size).map(|v| (k as f64, v)))
        .collect();
    plot.line("blind median sigma_hat", med_hat);
    plot.line("implicit schedule", implicit);

    let non_blind = match &cfg.non_blind {
        None => None,
        Some(nb) => {
            check_positive("n_seeds", nb.n_seeds)?;
            let (schedule, base) = nb.sampler.build(derive_seed(cfg.seed, 1))?;
            let oracle = DenoiserSpec::nonblind(m.clone());
            let runs = run_nonblind_batch(&oracle, &schedule, &base, nb.n_seeds)?;
            let [lo, hi] = nb.mid_steps;
            let n_steps = schedule.n_steps;
            if lo > hi || hi > n_steps {
                return Err(CliError::Config(format!("mid_steps must lie within 0..={n_steps}")));
            }
            let mut rows = Vec::new();
            let mut behind = Vec::new();
            for (i, t) in runs.iter().enumerate() {
                let sched = t.sigma_scheduled.as_ref().expect("non-blind runs record their schedule");
                for k in 0..t.len() {
                    rows.push(vec![i.to_string(), k.to_string(), num(sched[k]), num(t.sigma_hats[k])]);
                }
                behind.push((lo..=hi).filter(|&k| t.sigma_hats[k] > sched[k]).count());
            }
            out.table("track_non_blind.csv", &["seed_index", "step", "sigma_scheduled", "sigma_residual"], &rows)?;
            let sched = runs[0].sigma_scheduled.clone().unwrap_or_default();
            let mean_resid: Vec<(f64, f64)> = (0..runs[0].len())
                .map(|k| (k as f64, runs.iter().map(|t| t.sigma_hats[k]).sum::<f64>() / runs.len() as f64))
                .collect();
            plot.line("non-blind schedule", sched.iter().enumerate().map(|(k, v)| (k as f64, *v)).collect());
            plot.line("non-blind residual (mean)", mean_resid);
            let per = hi - lo + 1;
            Some(NonBlindTrack {
                mid_steps: nb.mid_steps,
                pooled_fraction_behind: behind.iter().sum::<usize>() as f64 / (per * runs.len()) as f64,
                behind_counts: behind,
                steps_per_seed: per,
            })
        }
    };
    out.plot("track.svg", &plot)?;
    let summary = TrackSummary {
        n_trajectories: trajs.len(),
        steps_checked: checked.len(),
        worst_step_median_gap: medians.iter().copied().reduce(f64::max),
        pooled_median_gap: (!pooled.is_empty()).then(|| median(pooled)),
        non_blind,
    };
    out.json("summary.json", &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------- mismatch

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MismatchCurve {
    pub sigma_star: f64,
    pub argmin_sigma: f64,
    pub argmin_index: isize,
    /// Mean squared error at the true level on the oracle draws.
    pub mse_at_truth: f64,
    pub mse_at_truth_std_err: f64,
    /// `E tr Cov(X | Y)` on the same draws.
    pub bayes_risk: f64,
    pub relative_excess: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MismatchSummary {
    pub curves: Vec<MismatchCurve>,
}

fn squared_errors(den: &DenoiserSpec, pairs: &[(DVector<f64>, DVector<f64>)], sigma: f64) -> Result<Estimate, CliError> {
    let errs = pairs
        .par_iter()
        .map(|(x, y)| den.denoise_nonblind(y, sigma).map(|f| (f - x).norm_squared()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Estimate::from_samples(&errs))
}

pub fn mismatch(cfg: &MismatchConfig, out: &Output) -> Result<MismatchSummary, CliError> {
    check_positive("n_draws", cfg.n_draws)?;
    check_positive("oracle_draws", cfg.oracle_draws)?;
    check_positive("points_per_decade", cfg.points_per_decade)?;
    let m = Arc::new(cfg.model.load()?);
    let den = DenoiserSpec::nonblind(m.clone());
    let hw = cfg.half_width as isize;
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut plot = Plot::new("Error under a misstated noise level", "sigma argument", "mean squared error")
        .axes(Axis::Log, Axis::Log);
    for (si, &star) in cfg.sigma_stars.iter().enumerate() {
        if !(star > 0.0 && star.is_finite()) {
            return Err(CliError::Config(format!("sigma_star must be positive, got {star}")));
        }
        plot.marker(star);
        let seed = derive_seed(cfg.seed, si as u64);
        let pairs = noisy_pairs(&m, star, cfg.n_draws, seed);
        let args: Vec<(isize, f64)> =
            (-hw..=hw).map(|i| (i, star * 10f64.powf(i as f64 / cfg.points_per_decade as f64))).collect();
        let curve = args.iter().map(|&(_, s)| squared_errors(&den, &pairs, s)).collect::<Result<Vec<_>, _>>()?;
        let best = (0..curve.len()).min_by(|&a, &b| curve[a].mean.total_cmp(&curve[b].mean)).unwrap_or(0);
        for (j, ((_, s), e)) in args.iter().zip(&curve).enumerate() {
            rows.push(vec![num(star), num(*s), num(e.mean), num(e.std_err), u8::from(j == best).to_string()]);
        }
        plot.line(&format!("sigma* = {star}"), args.iter().zip(&curve).map(|((_, s), e)| (*s, e.mean)).collect());

        let check = noisy_pairs(&m, star, cfg.oracle_draws, derive_seed(seed, 7));
        let at_truth = squared_errors(&den, &check, star)?;
        let risks = check
            .par_iter()
            .map(|(_, y)| m.posterior(y, star).map(|p| p.total_variance()))
            .collect::<Result<Vec<_>, _>>()?;
        let bayes = Estimate::from_samples(&risks).mean;
        curves.push(MismatchCurve {
            sigma_star: star,
            argmin_sigma: args[best].1,
            argmin_index: args[best].0,
            mse_at_truth: at_truth.mean,
            mse_at_truth_std_err: at_truth.std_err,
            bayes_risk: bayes,
            relative_excess: at_truth.mean / bayes - 1.0,
        });
    }
    out.table("mismatch.csv", &["sigma_star", "sigma_arg", "mse", "std_err", "is_argmin"], &rows)?;
    out.plot("mismatch.svg", &plot)?;
    let summary = MismatchSummary { curves };
    out.json("summary.json", &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub sigma: f64,
    pub mse: f64,
    pub std_err: f64,
    /// Non-blind Bayes risk on the same draws.
    pub bayes_risk: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub bundle: String,
    pub evaluation: Vec<EvalRow>,
}

/// Denoising error of `net` against the Bayes risk at each level.
pub fn evaluate_network(
    net: &DenseNet,
    m: &GaussianMixture,
    sigmas: &[f64],
    n_draws: usize,
    seed: u64,
) -> Result<Vec<EvalRow>, CliError> {
    let mut rows = Vec::new();
    for (i, &sigma) in sigmas.iter().enumerate() {
        let pairs = noisy_pairs(m, sigma, n_draws, derive_seed(seed, i as u64));
        let cond = net.is_conditioned().then_some(sigma);
        let errs = pairs
            .par_iter()
            .map(|(x, y)| net.denoise(y, cond).map(|f| (f - x).norm_squared()))
            .collect::<Result<Vec<_>, _>>()?;
        let risks = pairs
            .par_iter()
            .map(|(_, y)| m.posterior(y, sigma).map(|p| p.total_variance()))
            .collect::<Result<Vec<_>, _>>()?;
        let e = Estimate::from_samples(&errs);
        let bayes = Estimate::from_samples(&risks).mean;
        rows.push(EvalRow { sigma, mse: e.mean, std_err: e.std_err, bayes_risk: bayes, ratio: e.mean / bayes });
    }
    Ok(rows)
}

pub fn train(cfg: &TrainCommandConfig, out: &Output) -> Result<TrainSummary, CliError> {
    let m = cfg.model.load()?;
    let mut tc = TrainConfig::new(cfg.n_steps, cfg.seed);
    tc.batch_size = cfg.batch_size;
    tc.learning_rate = cfg.learning_rate;
    tc.weight_decay = cfg.weight_decay;
    tc.prior = cfg.prior.build()?;
    tc.log_every = cfg.log_every;
    tc.validate()?;
    let trainer = match &cfg.resume_from {
        Some(path) => {
            let mut t = Trainer::load(path)
                .map_err(|e| CliError::Config(format!("cannot resume from {}: {e}", path.display())))?;
            if t.net.is_conditioned() != cfg.conditioned || t.net.data_dim() != m.ambient_dim() {
                return Err(CliError::Config("resumed bundle does not match the configured network".into()));
            }
            if t.config.seed != tc.seed || t.config.batch_size != tc.batch_size || t.config.prior != tc.prior {
                return Err(CliError::Config("resumed bundle was trained with a different seed, batch or prior".into()));
            }
            t.config = tc;
            t.run(&m, cfg.n_steps)?;
            t
        }
        None => {
            let net = DenseNet::new(m.ambient_dim(), &cfg.hidden, cfg.conditioned, cfg.seed)?;
            train_blind(&m, net, tc)?
        }
    };
    let bundle = out.path("network.bin");
    trainer.save(&bundle)?;
    let rows: Vec<Vec<String>> = trainer.history.iter().map(|r| vec![r.step.to_string(), num(r.loss)]).collect();
    out.table("loss.csv", &["step", "loss"], &rows)?;
    let mut plot = Plot::new("Training loss", "step", "loss").axes(Axis::Linear, Axis::Log);
    plot.line("window mean", trainer.history.iter().map(|r| (r.step as f64, r.loss)).collect());
    out.plot("loss.svg", &plot)?;

    let evaluation = match &cfg.evaluate {
        Some(ev) => {
            check_positive("evaluation n_draws", ev.n_draws)?;
            let rows = evaluate_network(&trainer.net, &m, &ev.sigmas, ev.n_draws, derive_seed(cfg.seed, 77))?;
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| vec![num(r.sigma), num(r.mse), num(r.std_err), num(r.bayes_risk), num(r.ratio)])
                .collect();
            out.table("evaluation.csv", &["sigma", "mse", "std_err", "bayes_risk", "ratio"], &table)?;
            rows
        }
        None => Vec::new(),
    };
    let summary = TrainSummary {
        steps: trainer.step(),
        final_loss: trainer.history.last().map(|r| r.loss),
        bundle: "network.bin".into(),
        evaluation,
    };
    out.json("summary.json", &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------- compare

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareSeed {
    pub seed_index: usize,
    pub w1_first: f64,
    pub w1_second: f64,
    pub w1_capped_first: f64,
    pub w1_capped_second: f64,
    pub max_divergence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareSummary {
    pub first: String,
    pub second: String,
    pub seeds: Vec<CompareSeed>,
    /// Seeds where the first sampler's W1 is at most the second's.
    pub first_no_worse: usize,
}

enum Built {
    Blind(DenoiserSpec, bddm_core::SamplerConfig),
    NonBlind(DenoiserSpec, bddm_core::ExplicitSchedule, bddm_core::SamplerConfig),
}

impl Built {
    fn new(side: &SamplerSide, m: &Arc<GaussianMixture>) -> Result<Self, CliError> {
        Ok(match side {
            SamplerSide::Blind { denoiser, settings } => {
                let den = denoiser.build(m)?;
                if !den.is_blind() {
                    return Err(CliError::Config("blind side needs a blind denoiser".into()));
                }
                Self::Blind(den, settings.build(0)?)
            }
            SamplerSide::NonBlind { settings } => {
                let (schedule, cfg) = settings.build(0)?;
                Self::NonBlind(DenoiserSpec::nonblind(m.clone()), schedule, cfg)
            }
        })
    }

    fn run(&self, record: bool) -> SamplerRun<'_> {
        match self {
            Self::Blind(den, cfg) => {
                let mut config = cfg.clone();
                config.record_states = record;
                SamplerRun::Blind { denoiser: den, config }
            }
            Self::NonBlind(den, schedule, cfg) => {
                let mut config = cfg.clone();
                config.record_states = record;
                SamplerRun::NonBlind { denoiser: den, schedule: schedule.clone(), config }
            }
        }
    }
}

pub fn compare(cfg: &CompareConfig, out: &Output) -> Result<CompareSummary, CliError> {
    check_positive("n_seeds", cfg.n_seeds)?;
    check_positive("n_samples", cfg.n_samples)?;
    let m = Arc::new(cfg.model.load()?);
    let first = Built::new(&cfg.first, &m)?;
    let second = Built::new(&cfg.second, &m)?;
    let support = m.support();
    let mut seeds = Vec::new();
    let mut seed_rows = Vec::new();
    let mut div_rows = Vec::new();
    let mut plot = Plot::new("Distance between matched trajectories", "step", "|X_first - X_second|");
    for s in 0..cfg.n_seeds {
        let base = derive_seed(cfg.seed, s as u64);
        let pairs = (0..cfg.n_samples as u64)
            .into_par_iter()
            .map(|j| {
                let record = j == 0;
                matched_pair(&first.run(record), &second.run(record), derive_seed(base, j))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let a: Vec<DVector<f64>> = pairs.iter().map(|(x, _)| x.final_state.clone()).collect();
        let b: Vec<DVector<f64>> = pairs.iter().map(|(_, y)| y.final_state.clone()).collect();
        let fresh = m.sample(cfg.n_samples, derive_seed(base, 1_000_001));
        let wa = projected_w1(&a, &fresh, &support, base)?;
        let wb = projected_w1(&b, &fresh, &support, base)?;

        let (ta, tb) = &pairs[0];
        let steps = ta.states.len().min(tb.states.len());
        let div: Vec<f64> = (0..steps).map(|k| (&ta.states[k] - &tb.states[k]).norm()).collect();
        for (k, v) in div.iter().enumerate() {
            div_rows.push(vec![s.to_string(), k.to_string(), num(*v)]);
        }
        plot.line(&format!("seed {s}"), div.iter().enumerate().map(|(k, v)| (k as f64, *v)).collect());
        let row = CompareSeed {
            seed_index: s,
            w1_first: wa.raw,
            w1_second: wb.raw,
            w1_capped_first: wa.capped,
            w1_capped_second: wb.capped,
            max_divergence: div.iter().copied().fold(0.0, f64::max),
        };
        seed_rows.push(vec![
            s.to_string(),
            num(row.w1_first),
            num(row.w1_second),
            num(row.w1_capped_first),
            num(row.w1_capped_second),
            num(row.max_divergence),
        ]);
        seeds.push(row);
    }
    out.table(
        "compare_seeds.csv",
        &["seed_index", "w1_first", "w1_second", "w1_capped_first", "w1_capped_second", "max_divergence"],
        &seed_rows,
    )?;
    out.table("divergence.csv", &["seed_index", "step", "divergence"], &div_rows)?;
    out.plot("divergence.svg", &plot)?;
    let summary = CompareSummary {
        first: cfg.first.label().into(),
        second: cfg.second.label().into(),
        first_no_worse: seeds.iter().filter(|s| s.w1_first <= s.w1_second).count(),
        seeds,
    };
    out.json("summary.json", &summary)?;
    Ok(summary)
}
