mod common;

use std::sync::Arc;

use bddm_core::denoisers::residual_sigma_estimate;
use bddm_core::{DenoiserSpec, GaussianMixture, NoisePrior, NoiseStream, SigmaGrid};
use common::{random_mixture, two_gaussians};
use nalgebra::DVector;
use rand::Rng;

fn pairs(m: &GaussianMixture, sigma: f64, n: usize, seed: u64) -> Vec<(DVector<f64>, DVector<f64>)> {
    let stream = NoiseStream::new(seed);
    m.sample(n, seed)
        .into_iter()
        .enumerate()
        .map(|(i, x)| {
            let y = &x + stream.normal(i as u64 + 1, m.ambient_dim()) * sigma;
            (x, y)
        })
        .collect()
}

fn log_uniform() -> NoisePrior {
    NoisePrior::log_uniform(0.01, 10.0).unwrap()
}

fn blind_posterior(m: &Arc<GaussianMixture>) -> DenoiserSpec {
    let prior = log_uniform();
    DenoiserSpec::blind_posterior(m.clone(), prior, SigmaGrid::for_prior(&prior, 256).unwrap())
}

fn blind_mle(m: &Arc<GaussianMixture>) -> DenoiserSpec {
    let prior = NoisePrior::flat(0.01, 10.0).unwrap();
    DenoiserSpec::blind_mle(m.clone(), prior, SigmaGrid::for_prior(&prior, 256).unwrap())
}

/// `E[x | y]` under `x ~ p`, `sigma ~ Theta`, `y = x + sigma z`, by Monte
/// Carlo over `x` and trapezoid quadrature over `log sigma`.
#[test]
fn blind_posterior_matches_bayes_estimator() {
    let prior = NoisePrior::log_uniform(0.05, 3.0).unwrap();
    let nodes: Vec<f64> = (0..=1000).map(|i| (0.05f64.ln() + i as f64 * (60.0f64).ln() / 1000.0).exp()).collect();
    for case in 0..3u64 {
        let m = Arc::new(random_mixture(40 + case));
        let d = m.ambient_dim();
        let spec = DenoiserSpec::blind_posterior(m.clone(), prior, SigmaGrid::for_prior(&prior, 2048).unwrap());
        let mut rng = NoiseStream::new(case).rng(9);
        let sigma = prior.sample(&mut rng);
        let y = m.sample(1, 60 + case).remove(0) + NoiseStream::new(case).normal(3, d) * sigma;
        let xs = m.sample(50_000, 70 + case);
        let log_w: Vec<f64> = xs
            .iter()
            .map(|x| {
                let r2 = (x - &y).norm_squared();
                let terms: Vec<f64> = nodes
                    .iter()
                    .map(|&s| prior.log_density(s).unwrap() + s.ln() - d as f64 * s.ln() - r2 / (2.0 * s * s))
                    .collect();
                let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = terms.iter().enumerate().map(|(i, t)| {
                    let edge = if i == 0 || i == terms.len() - 1 { 0.5 } else { 1.0 };
                    edge * (t - top).exp()
                }).sum();
                top + sum.ln()
            })
            .collect();
        let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = w.iter().sum();
        let est = xs.iter().zip(&w).fold(DVector::zeros(d), |acc, (x, wi)| acc + x * *wi) / total;
        let se2 = xs.iter().zip(&w).fold(DVector::zeros(d), |acc, (x, wi)| {
            let r = (x - &est) * *wi;
            acc + r.component_mul(&r)
        }) / (total * total);
        let got = spec.denoise_blind_posterior(&y).unwrap();
        let gap = (&got - &est).norm();
        let se = se2.sum().sqrt();
        assert!(gap <= 3.0 * se, "case {case}: gap {gap:e}, se {se:e}");
        let _ = rng.random::<f64>();
    }
}

#[test]
fn mle_denoiser_tracks_true_noise_level_only_at_high_dimension() {
    let ratio_at = |d: usize| -> Vec<f64> {
        let m = Arc::new(two_gaussians(d));
        let oracle = DenoiserSpec::nonblind(m.clone());
        let mle = blind_mle(&m);
        pairs(&m, 0.5, 1000, 11)
            .iter()
            .map(|(_, y)| {
                let want = oracle.denoise_nonblind(y, 0.5).unwrap();
                let got = mle.denoise_blind_mle(y).unwrap().0;
                (&got - &want).norm() / (&want - y).norm()
            })
            .collect()
    };
    let high = ratio_at(500);
    let frac = high.iter().filter(|r| **r <= 0.05).count() as f64 / 1000.0;
    assert!(frac >= 0.9, "d=500 fraction {frac}");
    let low = ratio_at(2);
    let frac = low.iter().filter(|r| **r > 0.2).count() as f64 / 1000.0;
    assert!(frac >= 0.3, "d=2 fraction {frac}");
}

#[test]
fn residual_estimate_recovers_noise_level() {
    let m = Arc::new(two_gaussians(500));
    let spec = blind_posterior(&m);
    for sigma in [0.1, 0.5, 1.0, 2.0] {
        let ok = pairs(&m, sigma, 1000, 12)
            .iter()
            .filter(|(_, y)| {
                let f = spec.denoise_blind_posterior(y).unwrap();
                (residual_sigma_estimate(&f, y, 500) / sigma - 1.0).abs() <= 0.1
            })
            .count();
        assert!(ok >= 950, "sigma {sigma}: {ok} of 1000");
    }
}

fn mse(spec: &DenoiserSpec, data: &[(DVector<f64>, DVector<f64>)], sigma: Option<f64>) -> f64 {
    data.iter()
        .map(|(x, y)| {
            let f = match sigma {
                Some(s) => spec.denoise_nonblind(y, s).unwrap(),
                None => spec.denoise_blind(y).unwrap().denoised,
            };
            (f - x).norm_squared()
        })
        .sum::<f64>()
        / data.len() as f64
}

/// Rao-Blackwellised Bayes risk `E tr Cov(X | Y)` over the observations in `data`.
fn bayes_risk(m: &GaussianMixture, sigma: f64, data: &[(DVector<f64>, DVector<f64>)]) -> f64 {
    data.iter().map(|(_, y)| m.posterior(y, sigma).unwrap().total_variance()).sum::<f64>() / data.len() as f64
}

#[test]
fn mismatch_curve_is_minimised_at_true_level() {
    let m = Arc::new(two_gaussians(500));
    let spec = DenoiserSpec::nonblind(m.clone());
    for sigma_star in [0.025, 0.15, 0.6] {
        let args: Vec<f64> = (-20..=20).map(|i| sigma_star * 10f64.powf(i as f64 / 20.0)).collect();
        let data = pairs(&m, sigma_star, 2000, 13);
        let curve: Vec<f64> = args.iter().map(|&s| mse(&spec, &data, Some(s))).collect();
        let best = (0..args.len()).min_by(|&a, &b| curve[a].total_cmp(&curve[b])).unwrap();
        let nearest = (0..args.len())
            .min_by(|&a, &b| (args[a].ln() - sigma_star.ln()).abs().total_cmp(&(args[b].ln() - sigma_star.ln()).abs()))
            .unwrap();
        assert_eq!(best, nearest, "sigma* {sigma_star}");
        let check = pairs(&m, sigma_star, 50_000, 14);
        let at_truth = mse(&spec, &check, Some(sigma_star));
        let oracle = bayes_risk(&m, sigma_star, &check);
        assert!((at_truth / oracle - 1.0).abs() <= 0.02, "sigma* {sigma_star}: {at_truth} vs {oracle}");
    }
}

#[test]
fn blind_matches_nonblind_at_high_dimension() {
    let m = Arc::new(two_gaussians(500));
    let blind = blind_posterior(&m);
    let oracle = DenoiserSpec::nonblind(m.clone());
    for sigma in [0.1, 0.5, 1.0] {
        let data = pairs(&m, sigma, 1000, 15);
        let r = mse(&blind, &data, None) / mse(&oracle, &data, Some(sigma));
        assert!(r <= 1.05, "sigma {sigma}: ratio {r}");
    }
}

#[test]
fn blind_penalty_shrinks_with_dimension() {
    let ratios: Vec<f64> = [2usize, 50, 500]
        .iter()
        .map(|&d| {
            let m = Arc::new(two_gaussians(d));
            let blind = blind_posterior(&m);
            let oracle = DenoiserSpec::nonblind(m.clone());
            let data = pairs(&m, 0.5, 1000, 16);
            mse(&blind, &data, None) / mse(&oracle, &data, Some(0.5))
        })
        .collect();
    for w in ratios.windows(2) {
        assert!(w[1] <= 1.1 * w[0], "{ratios:?}");
    }
}

#[test]
fn nonblind_denoiser_is_tweedie() {
    for seed in 0..20 {
        let m = Arc::new(random_mixture(seed));
        let spec = DenoiserSpec::nonblind(m.clone());
        let (_, y) = pairs(&m, 0.4, 1, seed).remove(0);
        let f = spec.denoise_nonblind(&y, 0.4).unwrap();
        let tweedie = &y + m.noisy_score(&y, 0.4).unwrap() * 0.16;
        assert!((&f - tweedie).amax() <= 1e-10);
        assert!((f - m.posterior(&y, 0.4).unwrap().mean()).amax() <= 1e-8);
    }
}
