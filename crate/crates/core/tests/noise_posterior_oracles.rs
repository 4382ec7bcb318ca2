mod common;

use bddm_core::noise_posterior::{ell_derivatives, lambda_log_density, mle_sigma, posterior_log_density, posterior_moments};
use bddm_core::{GaussianMixture, NoisePosterior, NoisePrior, NoiseStream, SigmaGrid};
use common::{median, random_mixture, two_gaussians};
use nalgebra::DVector;
use rand::Rng;

fn noisy_draws(m: &GaussianMixture, sigma: f64, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let stream = NoiseStream::new(seed);
    m.sample(n, seed)
        .into_iter()
        .enumerate()
        .map(|(i, x)| x + stream.normal(i as u64 + 1, m.ambient_dim()) * sigma)
        .collect()
}

fn default_prior() -> NoisePrior {
    NoisePrior::log_uniform(0.01, 10.0).unwrap()
}

fn band_mass(d: usize) -> f64 {
    let m = two_gaussians(d);
    let prior = default_prior();
    let grid = SigmaGrid::for_prior(&prior, 8192).unwrap();
    let ys = noisy_draws(&m, 0.5, 100, 1);
    let mut mass = 0.0;
    for y in &ys {
        let post = NoisePosterior::evaluate(&m, &prior, y, &grid).unwrap();
        mass += post.expectation(|s| if (0.45..=0.55).contains(&s) { 1.0 } else { 0.0 });
    }
    mass / ys.len() as f64
}

/// Posterior sd of sigma is about sigma / sqrt(2(d - k)) and its centre moves
/// by as much again between draws, which caps the average mass in +-10% near
/// 0.97 at d = 500.
#[test]
#[ignore = "unattainable at d=500: averaged mass is ~0.964, see README"]
fn posterior_mass_above_099_at_d500() {
    let mass = band_mass(500);
    assert!(mass > 0.99, "mass {mass}");
}

#[test]
fn posterior_mass_concentrates_with_dimension() {
    let low = band_mass(50);
    let mid = band_mass(500);
    let high = band_mass(2000);
    assert!(low < mid && mid < high, "{low} {mid} {high}");
    assert!(mid > 0.95, "d=500 mass {mid}");
    assert!(high > 0.99, "d=2000 mass {high}");
}

#[test]
fn mle_is_accurate_at_d500_and_broad_at_d2() {
    let prior = NoisePrior::flat(0.01, 10.0).unwrap();
    let grid = SigmaGrid::for_prior(&prior, 256).unwrap();
    let rel_errors = |d: usize| -> Vec<f64> {
        let m = two_gaussians(d);
        noisy_draws(&m, 0.5, 1000, 2)
            .iter()
            .map(|y| (mle_sigma(&m, &prior, y, &grid).unwrap().sigma - 0.5) / 0.5)
            .collect()
    };
    let rmse = |e: &[f64]| (e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt();
    let high = rel_errors(500);
    let low = rel_errors(2);
    assert!(rmse(&high) <= 0.05, "d=500 rmse {}", rmse(&high));
    assert!(rmse(&low) >= 4.0 * rmse(&high));
    let mut sorted = low.clone();
    sorted.sort_by(f64::total_cmp);
    let iqr = 0.5 * (sorted[749] - sorted[249]);
    assert!(iqr >= 0.2 * 0.5, "iqr {iqr}");
}

#[test]
fn lambda_variance_scales_inversely_with_dimension() {
    let prior = default_prior();
    let grid = SigmaGrid::for_prior(&prior, 256).unwrap();
    let lambda_star = 1.0 / 0.25;
    let scaled: Vec<f64> = [100, 200, 400, 800]
        .iter()
        .map(|&d| {
            let m = two_gaussians(d);
            let ys = noisy_draws(&m, 0.5, 200, 3);
            let v = ys.iter().map(|y| posterior_moments(&m, &prior, y, &grid).unwrap().var_lambda).sum::<f64>() / 200.0;
            v / (lambda_star * lambda_star) * d as f64
        })
        .collect();
    for s in &scaled {
        let r = s / scaled[0];
        assert!((1.0 / 1.5..=1.5).contains(&r), "d * var ratios {scaled:?}");
    }
}

#[test]
fn sigma_variance_decreases_with_dimension() {
    let prior = default_prior();
    let grid = SigmaGrid::for_prior(&prior, 256).unwrap();
    let vars: Vec<f64> = [2, 50, 200, 800]
        .iter()
        .map(|&d| {
            let m = two_gaussians(d);
            let ys = noisy_draws(&m, 0.5, 100, 4);
            ys.iter().map(|y| posterior_moments(&m, &prior, y, &grid).unwrap().var_sigma).sum::<f64>() / 100.0
        })
        .collect();
    for w in vars.windows(2) {
        assert!(w[1] <= 1.1 * w[0], "{vars:?}");
    }
}

#[test]
fn posterior_mean_sigma_is_centred() {
    let m = two_gaussians(500);
    let prior = default_prior();
    let grid = SigmaGrid::for_prior(&prior, 256).unwrap();
    let ys = noisy_draws(&m, 0.5, 200, 5);
    let mean = ys.iter().map(|y| posterior_moments(&m, &prior, y, &grid).unwrap().mean_sigma).sum::<f64>() / 200.0;
    assert!((0.48..=0.52).contains(&mean), "mean sigma {mean}");
}

/// `mu(sigma | y) ~ Theta(sigma) sigma^{-d} E_X[exp(-|X - y|^2 / (2 sigma^2))]`,
/// with the expectation replaced by a direct average over model draws.
#[test]
fn posterior_matches_direct_monte_carlo() {
    let prior = default_prior();
    for seed in 0..4 {
        let m = random_mixture(seed + 20);
        let d = m.ambient_dim() as f64;
        let y = noisy_draws(&m, 0.8, 1, seed).remove(0);
        let xs = m.sample(100_000, 50 + seed);
        let mut offsets = Vec::new();
        for sigma in [0.5, 0.8, 1.5] {
            let v: Vec<f64> = xs.iter().map(|x| (-(x - &y).norm_squared() / (2.0 * sigma * sigma)).exp()).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0);
            let se = (var / v.len() as f64).sqrt();
            let closed = (0.5 * d * (2.0 * std::f64::consts::PI * sigma * sigma).ln() + m.noisy_log_density(&y, sigma).unwrap()).exp();
            assert!((closed - mean).abs() <= 3.0 * se, "seed {seed} sigma {sigma}: {closed} vs {mean} +- {se}");
            let direct = prior.log_density(sigma).unwrap() - d * sigma.ln() + closed.ln();
            offsets.push(posterior_log_density(&m, &prior, &y, sigma).unwrap() - direct);
        }
        assert!(offsets.iter().all(|o| (o - offsets[0]).abs() <= 1e-8), "{offsets:?}");
    }
}

#[test]
fn ell_derivatives_match_finite_differences() {
    let mut rng = NoiseStream::new(77).rng(0);
    for i in 0..100u64 {
        let m = random_mixture(i % 17);
        let prior = NoisePrior::new(rng.random_range(0.0..3.0), 0.05, 5.0).unwrap();
        let y = noisy_draws(&m, 0.7, 1, i).remove(0);
        let lambda = (rng.random_range((0.04f64).ln()..(400.0f64).ln())).exp();
        let (l1, l2) = ell_derivatives(&m, &prior, &y, lambda).unwrap();
        let ell = |l: f64| -lambda_log_density(&m, &prior, &y, l).unwrap();
        let h = 1e-4 * lambda;
        let fd1 = (ell(lambda + h) - ell(lambda - h)) / (2.0 * h);
        assert!((fd1 - l1).abs() <= 1e-5 * l1.abs().max(1.0 / lambda), "pair {i}: {l1} vs {fd1}");
        let d1 = |l: f64| ell_derivatives(&m, &prior, &y, l).unwrap().0;
        let fd2 = (d1(lambda + h) - d1(lambda - h)) / (2.0 * h);
        assert!((fd2 - l2).abs() <= 1e-4 * l2.abs().max(1.0 / (lambda * lambda)), "pair {i}: {l2} vs {fd2}");
    }
}

#[test]
fn prior_normalizer_matches_quadrature() {
    for alpha in [0.0, 1.0, 2.0, 2.5, 3.0, 4.0] {
        let prior = NoisePrior::new(alpha, 0.01, 10.0).unwrap();
        let n = 200_000;
        let (a, b) = (0.01f64.ln(), 10f64.ln());
        let h = (b - a) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let s = (a + i as f64 * h).exp();
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * prior.log_density(s).unwrap().exp() * s * h;
        }
        assert!((total - 1.0).abs() <= 1e-8, "alpha {alpha}: {total}");
    }
}

#[test]
fn mle_posterior_denoiser_relative_distance_is_small() {
    use bddm_core::DenoiserSpec;
    use std::sync::Arc;
    let m = Arc::new(two_gaussians(500));
    let prior = default_prior();
    let grid = SigmaGrid::for_prior(&prior, 256).unwrap();
    let mle = DenoiserSpec::blind_mle(m.clone(), NoisePrior::flat(0.01, 10.0).unwrap(), grid.clone());
    let post = DenoiserSpec::blind_posterior(m.clone(), prior, grid);
    let ratios: Vec<f64> = noisy_draws(&m, 0.5, 200, 6)
        .iter()
        .map(|y| {
            let a = mle.denoise_blind_mle(y).unwrap().0;
            let b = post.denoise_blind_posterior(y).unwrap();
            (&a - &b).norm() / (&b - y).norm()
        })
        .collect();
    assert!(median(ratios.clone()) <= 1e-2, "median {}", median(ratios));
}
