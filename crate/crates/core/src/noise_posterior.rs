//! Priors over the noise level and the posterior over the noise level given a
//! single noisy observation.
//!
//! For a prior `Theta(sigma) ∝ sigma^(alpha - 3)` on `[sigma_min, sigma_max]`
//! the posterior satisfies
//!
//! ```text
//! mu(sigma | y) ∝ Theta(sigma) sigma^-d E_X[exp(-|X - y|^2 / (2 sigma^2))]
//!              ∝ Theta(sigma) p_sigma(y)
//! ```
//!
//! because `E_X[exp(-|X - y|^2 / (2 sigma^2))] = (2 pi sigma^2)^(d/2) p_sigma(y)`.
//! Under `lambda = sigma^-2` the same posterior reads
//! `nu(lambda | y) ∝ lambda^((d - alpha)/2) E_X[exp(-lambda |X - y|^2 / 2)]`.

use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_err, Result};
use crate::linalg::log_sum_exp;
use crate::mixture::{GaussianMixture, Projected};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const GOLDEN_ITERATIONS: usize = 30;
pub const DEFAULT_GRID_NODES: usize = 256;

/// Power-law prior `Theta(sigma) ∝ sigma^(alpha - 3)` on `[sigma_min, sigma_max]`.
///
/// `alpha = 2` is log-uniform, `alpha = 0` is uniform in `lambda = sigma^-2`,
/// `alpha = 3` is flat in `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePrior {
    alpha: f64,
    sigma_min: f64,
    sigma_max: f64,
}

impl NoisePrior {
    pub fn new(alpha: f64, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return config_err("prior exponent must be finite");
        }
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return config_err(format!("prior support [{sigma_min}, {sigma_max}] is invalid"));
        }
        Ok(Self { alpha, sigma_min, sigma_max })
    }

    pub fn log_uniform(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        Self::new(2.0, sigma_min, sigma_max)
    }

    /// `Theta ∝ sigma^-3`, the prior that is uniform in `lambda`.
    pub fn inverse_cubic(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        Self::new(0.0, sigma_min, sigma_max)
    }

    pub fn flat(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        Self::new(3.0, sigma_min, sigma_max)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    fn exponent(&self) -> f64 {
        self.alpha - 2.0
    }

    /// The constant `c` with `Theta(sigma) = c sigma^(alpha - 3)`.
    pub fn normalizer(&self) -> f64 {
        let b = self.exponent();
        let integral = if b.abs() < 1e-12 {
            (self.sigma_max / self.sigma_min).ln()
        } else {
            (self.sigma_max.powf(b) - self.sigma_min.powf(b)) / b
        };
        1.0 / integral
    }

    pub fn contains(&self, sigma: f64) -> bool {
        sigma >= self.sigma_min * (1.0 - 1e-12) && sigma <= self.sigma_max * (1.0 + 1e-12)
    }

    pub fn log_density(&self, sigma: f64) -> Result<f64> {
        if !self.contains(sigma) {
            return domain_err(format!(
                "sigma = {sigma} outside prior support [{}, {}]",
                self.sigma_min, self.sigma_max
            ));
        }
        Ok(self.normalizer().ln() + (self.alpha - 3.0) * sigma.ln())
    }

    /// `E[sigma^p]` under the prior.
    pub fn moment(&self, p: f64) -> f64 {
        let b = self.exponent() + p;
        let integral = if b.abs() < 1e-12 {
            (self.sigma_max / self.sigma_min).ln()
        } else {
            (self.sigma_max.powf(b) - self.sigma_min.powf(b)) / b
        };
        self.normalizer() * integral
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let b = self.exponent();
        let s = if b.abs() < 1e-12 {
            self.sigma_min * (self.sigma_max / self.sigma_min).powf(u)
        } else {
            let lo = self.sigma_min.powf(b);
            let hi = self.sigma_max.powf(b);
            (lo + u * (hi - lo)).powf(1.0 / b)
        };
        s.clamp(self.sigma_min, self.sigma_max)
    }

    /// Support of the prior in `lambda = sigma^-2`.
    pub fn lambda_range(&self) -> (f64, f64) {
        (self.sigma_max.powi(-2), self.sigma_min.powi(-2))
    }
}

/// Log-spaced quadrature nodes over a noise-level interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaGrid {
    nodes: Vec<f64>,
}

impl SigmaGrid {
    pub fn log_uniform(sigma_min: f64, sigma_max: f64, count: usize) -> Result<Self> {
        if count < 16 {
            return config_err(format!("grid needs at least 16 nodes, got {count}"));
        }
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return config_err(format!("grid range [{sigma_min}, {sigma_max}] is invalid"));
        }
        let (lo, hi) = (sigma_min.ln(), sigma_max.ln());
        let step = (hi - lo) / (count - 1) as f64;
        let mut nodes: Vec<f64> = (0..count).map(|i| (lo + step * i as f64).exp()).collect();
        nodes[0] = sigma_min;
        nodes[count - 1] = sigma_max;
        Ok(Self { nodes })
    }

    /// Grid spanning the whole prior support.
    pub fn for_prior(prior: &NoisePrior, count: usize) -> Result<Self> {
        Self::log_uniform(prior.sigma_min(), prior.sigma_max(), count)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.nodes[0]
    }

    pub fn max(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    /// Spacing in `log sigma`.
    pub fn log_step(&self) -> f64 {
        (self.max() / self.min()).ln() / (self.len() - 1) as f64
    }

    fn check_within(&self, prior: &NoisePrior) -> Result<()> {
        if !prior.contains(self.min()) || !prior.contains(self.max()) {
            return domain_err("sigma grid extends beyond the prior support");
        }
        Ok(())
    }
}

/// Point estimate of the noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MleEstimate {
    pub sigma: f64,
    /// The grid maximum sat on the first or last node.
    pub at_boundary: bool,
}

/// Posterior summaries under `lambda = sigma^-2` and `sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorMoments {
    pub mean_lambda: f64,
    pub var_lambda: f64,
    pub mean_sigma: f64,
    pub var_sigma: f64,
}

fn log_post_projected(model: &GaussianMixture, prior: &NoisePrior, p: &Projected, sigma: f64) -> Result<f64> {
    Ok(prior.log_density(sigma)? + log_sum_exp(&model.log_components(p, sigma * sigma)))
}

/// `log mu(sigma | y)` up to an additive constant that depends only on `y`.
pub fn posterior_log_density(model: &GaussianMixture, prior: &NoisePrior, y: &DVector<f64>, sigma: f64) -> Result<f64> {
    let lp = prior.log_density(sigma)?;
    Ok(lp + model.noisy_log_density(y, sigma)?)
}

/// `log nu(lambda | y)` up to an additive constant that depends only on `y`.
pub fn lambda_log_density(model: &GaussianMixture, prior: &NoisePrior, y: &DVector<f64>, lambda: f64) -> Result<f64> {
    check_lambda(prior, lambda)?;
    let d = model.ambient_dim() as f64;
    let sigma = lambda.powf(-0.5);
    // log E_X[exp(-lambda |X - y|^2 / 2)] = (d/2) log(2 pi / lambda) + log p_sigma(y)
    let log_gauss_mean = 0.5 * d * (LN_2PI - lambda.ln()) + model.noisy_log_density(y, sigma)?;
    Ok(0.5 * (d - prior.alpha()) * lambda.ln() + log_gauss_mean)
}

fn check_lambda(prior: &NoisePrior, lambda: f64) -> Result<()> {
    let (lo, hi) = prior.lambda_range();
    if !(lambda >= lo * (1.0 - 1e-12) && lambda <= hi * (1.0 + 1e-12)) {
        return domain_err(format!("lambda = {lambda} outside [{lo}, {hi}]"));
    }
    Ok(())
}

/// First and second derivatives of `ell = -log nu(. | y)` at `lambda`, from the
/// exact conditional moments of `|X - y|^2` under the posterior at
/// `sigma = lambda^-1/2`.
pub fn ell_derivatives(model: &GaussianMixture, prior: &NoisePrior, y: &DVector<f64>, lambda: f64) -> Result<(f64, f64)> {
    check_lambda(prior, lambda)?;
    let d = model.ambient_dim() as f64;
    let post = model.posterior(y, lambda.powf(-0.5))?;
    let (mean, var) = post.squared_distance_moments(y)?;
    let first = -(d - prior.alpha()) / (2.0 * lambda) + 0.5 * mean;
    let second = (d - prior.alpha()) / (2.0 * lambda * lambda) - 0.25 * var;
    Ok((first, second))
}

/// The posterior over the noise level tabulated on a [`SigmaGrid`].
#[derive(Debug, Clone)]
pub struct NoisePosterior {
    nodes: Vec<f64>,
    log_post: Vec<f64>,
    weights: Vec<f64>,
    log_step: f64,
}

impl NoisePosterior {
    pub fn evaluate(model: &GaussianMixture, prior: &NoisePrior, y: &DVector<f64>, grid: &SigmaGrid) -> Result<Self> {
        let p = model.project(y)?;
        Self::from_projected(model, prior, &p, grid)
    }

    pub(crate) fn from_projected(model: &GaussianMixture, prior: &NoisePrior, p: &Projected, grid: &SigmaGrid) -> Result<Self> {
        grid.check_within(prior)?;
        let mut log_post = grid
            .nodes()
            .iter()
            .map(|&s| log_post_projected(model, prior, p, s))
            .collect::<Result<Vec<f64>>>()?;
        let max = log_post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for v in log_post.iter_mut() {
            *v -= max;
        }
        // trapezoid in u = log sigma of mu(sigma) sigma
        let n = log_post.len();
        let mut weights: Vec<f64> = (0..n)
            .map(|j| {
                let end = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                end * log_post[j].exp() * grid.nodes()[j]
            })
            .collect();
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
        Ok(Self { nodes: grid.nodes().to_vec(), log_post, weights, log_step: grid.log_step() })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Log posterior at the nodes, shifted so the maximum is 0.
    pub fn log_posterior(&self) -> &[f64] {
        &self.log_post
    }

    /// Quadrature weights (sum to 1) for expectations under the posterior.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Posterior density in `sigma` at the nodes, normalised by the same
    /// trapezoid rule as [`Self::weights`].
    pub fn density(&self) -> Vec<f64> {
        let n = self.nodes.len();
        let z: f64 = (0..n)
            .map(|j| {
                let end = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                end * self.log_post[j].exp() * self.nodes[j]
            })
            .sum::<f64>()
            * self.log_step;
        self.log_post.iter().map(|lp| lp.exp() / z).collect()
    }

    /// Index of the largest node value; ties go to the smaller sigma.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (j, v) in self.log_post.iter().enumerate() {
            if *v > self.log_post[best] {
                best = j;
            }
        }
        best
    }

    pub fn expectation(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(s, w)| w * f(*s)).sum()
    }

    pub fn moments(&self) -> PosteriorMoments {
        let mean_lambda = self.expectation(|s| s.powi(-2));
        let var_lambda = self.expectation(|s| (s.powi(-2) - mean_lambda).powi(2));
        let mean_sigma = self.expectation(|s| s);
        let var_sigma = self.expectation(|s| (s - mean_sigma).powi(2));
        PosteriorMoments { mean_lambda, var_lambda, mean_sigma, var_sigma }
    }

    /// CSV with columns `sigma, log_post, normalized_density`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sigma", "log_post", "normalized_density"])?;
        for ((s, lp), dens) in self.nodes.iter().zip(&self.log_post).zip(self.density()) {
            w.write_record([s.to_string(), lp.to_string(), dens.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn mle_projected(model: &GaussianMixture, prior: &NoisePrior, p: &Projected, grid: &SigmaGrid) -> Result<MleEstimate> {
    let post = NoisePosterior::from_projected(model, prior, p, grid)?;
    let j = post.argmax();
    let n = grid.len();
    let nodes = grid.nodes();
    let at_boundary = j == 0 || j == n - 1;
    let lo = nodes[j.saturating_sub(1)].ln();
    let hi = nodes[(j + 1).min(n - 1)].ln();
    let f = |u: f64| log_post_projected(model, prior, p, u.exp().clamp(grid.min(), grid.max()));

    let mut best_u = nodes[j].ln();
    let mut best = f(best_u)?;
    let mut best_sigma = nodes[j];
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - ratio * (b - a);
    let mut e = a + ratio * (b - a);
    let mut fc = f(c)?;
    let mut fe = f(e)?;
    for _ in 0..GOLDEN_ITERATIONS {
        if fc >= fe {
            b = e;
            e = c;
            fe = fc;
            c = b - ratio * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + ratio * (b - a);
            fe = f(e)?;
        }
    }
    for (u, v) in [(c, fc), (e, fe)] {
        if v > best || (v == best && u < best_u) {
            best = v;
            best_u = u;
            best_sigma = u.exp().clamp(grid.min(), grid.max());
        }
    }
    Ok(MleEstimate { sigma: best_sigma, at_boundary })
}

/// `argmax_sigma mu(sigma | y)`: the grid maximiser refined by golden-section
/// search over the two neighbouring cells.
pub fn mle_sigma(model: &GaussianMixture, prior: &NoisePrior, y: &DVector<f64>, grid: &SigmaGrid) -> Result<MleEstimate> {
    let p = model.project(y)?;
    mle_projected(model, prior, &p, grid)
}

pub fn posterior_moments(model: &GaussianMixture, prior: &NoisePrior, y: &DVector<f64>, grid: &SigmaGrid) -> Result<PosteriorMoments> {
    Ok(NoisePosterior::evaluate(model, prior, y, grid)?.moments())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::SubspaceEmbedding;
    use nalgebra::DMatrix;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn near_point_mass(d: usize) -> GaussianMixture {
        GaussianMixture::uniform(vec![DVector::zeros(d)], DMatrix::identity(d, d) * 1e-6).unwrap()
    }

    fn two_bumps(d: usize, seed: u64) -> GaussianMixture {
        let cov = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2]);
        let m = GaussianMixture::uniform(vec![dv(&[1.5, -0.5]), dv(&[-1.0, 0.8])], cov).unwrap();
        m.embed(&SubspaceEmbedding::random(2, d, seed).unwrap()).unwrap()
    }

    /// `y` with `|y|^2 = d sigma^2` exactly.
    fn pure_noise(d: usize, sigma: f64, seed: u64) -> DVector<f64> {
        let z = crate::rng::NoiseStream::new(seed).normal(0, d);
        let n = z.norm();
        z * (sigma * (d as f64).sqrt() / n)
    }

    #[test]
    fn prior_normalizer_matches_quadrature() {
        for alpha in [0.0, 2.0, 3.0, 1.3] {
            let prior = NoisePrior::new(alpha, 0.01, 10.0).unwrap();
            let n = 200_001;
            let (lo, hi) = (0.01f64.ln(), 10f64.ln());
            let h = (hi - lo) / (n - 1) as f64;
            let mut total = 0.0;
            for i in 0..n {
                let u = lo + h * i as f64;
                let wt = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                total += wt * prior.log_density(u.exp()).unwrap().exp() * u.exp();
            }
            assert!((total * h - 1.0).abs() < 1e-8, "alpha {alpha}: {}", total * h);
        }
    }

    #[test]
    fn prior_sampling_stays_in_support() {
        let prior = NoisePrior::inverse_cubic(0.1, 3.0).unwrap();
        let mut rng = crate::rng::NoiseStream::new(1).rng(0);
        let draws: Vec<f64> = (0..20_000).map(|_| prior.sample(&mut rng)).collect();
        assert!(draws.iter().all(|s| prior.contains(*s)));
        // uniform in lambda: mean of lambda is the midpoint of the lambda range
        let (lo, hi) = prior.lambda_range();
        let mean_l = draws.iter().map(|s| s.powi(-2)).sum::<f64>() / draws.len() as f64;
        assert!((mean_l - 0.5 * (lo + hi)).abs() < 0.02 * (hi - lo));
    }

    #[test]
    fn grid_is_log_uniform() {
        let g = SigmaGrid::log_uniform(0.05, 4.0, 64).unwrap();
        let steps: Vec<f64> = g.nodes().windows(2).map(|w| (w[1] / w[0]).ln()).collect();
        for s in &steps {
            assert!((s - steps[0]).abs() < 1e-12);
        }
        assert_eq!(g.min(), 0.05);
        assert_eq!(g.max(), 4.0);
        assert!(SigmaGrid::log_uniform(0.05, 4.0, 15).is_err());
    }

    #[test]
    fn out_of_support_is_a_domain_error() {
        let m = near_point_mass(3);
        let prior = NoisePrior::log_uniform(0.1, 1.0).unwrap();
        let y = dv(&[0.1, 0.2, 0.3]);
        assert!(posterior_log_density(&m, &prior, &y, 2.0).is_err());
        assert!(lambda_log_density(&m, &prior, &y, 1000.0).is_err());
    }

    #[test]
    fn posterior_peaks_at_noise_energy() {
        let d = 50;
        let target = 0.7;
        let m = near_point_mass(d);
        let prior = NoisePrior::flat(0.1, 3.0).unwrap();
        let grid = SigmaGrid::log_uniform(0.1, 3.0, 1024).unwrap();
        let y = pure_noise(d, target, 4);
        let post = NoisePosterior::evaluate(&m, &prior, &y, &grid).unwrap();
        let j = post.argmax();
        let cell = grid.log_step();
        assert!((grid.nodes()[j] / target).ln().abs() <= cell, "{}", grid.nodes()[j]);

        let est = mle_sigma(&m, &prior, &y, &grid).unwrap();
        let exact = (y.norm_squared() / d as f64 - 1e-6).sqrt();
        assert!((est.sigma - exact).abs() < 1e-6, "{} vs {exact}", est.sigma);
        assert!(!est.at_boundary);
    }

    #[test]
    fn log_posterior_difference_is_prior_plus_likelihood() {
        let m = two_bumps(20, 1);
        let prior = NoisePrior::log_uniform(0.05, 5.0).unwrap();
        let y = m.sample(1, 3)[0].clone() + crate::rng::NoiseStream::new(2).normal(0, 20) * 0.4;
        let (s1, s2) = (0.3, 0.9);
        let lhs = posterior_log_density(&m, &prior, &y, s1).unwrap() - posterior_log_density(&m, &prior, &y, s2).unwrap();
        let rhs = prior.log_density(s1).unwrap() - prior.log_density(s2).unwrap()
            + m.noisy_log_density(&y, s1).unwrap()
            - m.noisy_log_density(&y, s2).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn lambda_and_sigma_posteriors_agree_under_change_of_variables() {
        let m = two_bumps(30, 2);
        let prior = NoisePrior::new(1.0, 0.05, 5.0).unwrap();
        let y = m.sample(1, 5)[0].clone() + crate::rng::NoiseStream::new(6).normal(0, 30) * 0.5;
        let offset = |lambda: f64| {
            lambda_log_density(&m, &prior, &y, lambda).unwrap()
                - posterior_log_density(&m, &prior, &y, lambda.powf(-0.5)).unwrap()
                + 1.5 * lambda.ln()
        };
        let c0 = offset(0.5);
        for lambda in [0.05, 1.0, 4.0, 30.0, 399.0] {
            assert!((offset(lambda) - c0).abs() < 1e-8);
        }
    }

    #[test]
    fn point_mass_lambda_mode() {
        // K = 1, S = 0: nu is Gamma-shaped with mode (d - alpha) / |y|^2
        let d = 40;
        let m = GaussianMixture::uniform(vec![DVector::zeros(d)], DMatrix::zeros(d, d)).unwrap();
        let prior = NoisePrior::inverse_cubic(0.2, 5.0).unwrap();
        let y = pure_noise(d, 0.8, 9);
        let mode = (d as f64 - prior.alpha()) / y.norm_squared();
        let f = |l: f64| lambda_log_density(&m, &prior, &y, l).unwrap();
        assert!(f(mode) > f(mode * 1.001) && f(mode) > f(mode * 0.999));
        let (first, second) = ell_derivatives(&m, &prior, &y, mode).unwrap();
        assert!(first.abs() < 1e-9 * y.norm_squared());
        assert!(second > 0.0);
    }

    #[test]
    fn ell_derivatives_match_finite_differences() {
        let m = two_bumps(10, 4);
        let prior = NoisePrior::log_uniform(0.05, 5.0).unwrap();
        for trial in 0..20u64 {
            let sigma = 0.2 + 0.1 * trial as f64;
            let y = m.sample(1, trial)[0].clone() + crate::rng::NoiseStream::new(100 + trial).normal(0, 10) * sigma;
            let lambda = sigma.powi(-2) * (0.8 + 0.02 * trial as f64);
            let ell = |l: f64| -lambda_log_density(&m, &prior, &y, l).unwrap();
            let (first, second) = ell_derivatives(&m, &prior, &y, lambda).unwrap();
            let h = 1e-4 * lambda;
            let fd1 = (ell(lambda + h) - ell(lambda - h)) / (2.0 * h);
            let fd2 = (ell(lambda + h) - 2.0 * ell(lambda) + ell(lambda - h)) / (h * h);
            assert!((fd1 - first).abs() <= 1e-5 * first.abs().max(1.0 / lambda), "{fd1} vs {first}");
            assert!((fd2 - second).abs() <= 1e-4 * second.abs().max(1.0 / lambda.powi(2)), "{fd2} vs {second}");
        }
    }

    #[test]
    fn ell_prime_changes_sign_at_lambda_mode() {
        let m = two_bumps(100, 7);
        let prior = NoisePrior::log_uniform(0.05, 5.0).unwrap();
        let y = m.sample(1, 1)[0].clone() + crate::rng::NoiseStream::new(1).normal(0, 100) * 0.6;
        let (lo, hi) = prior.lambda_range();
        let n = 4000;
        let lambdas: Vec<f64> = (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect();
        let mut best = 0;
        for (i, l) in lambdas.iter().enumerate() {
            if lambda_log_density(&m, &prior, &y, *l).unwrap() > lambda_log_density(&m, &prior, &y, lambdas[best]).unwrap() {
                best = i;
            }
        }
        let (below, _) = ell_derivatives(&m, &prior, &y, lambdas[best - 1]).unwrap();
        let (above, _) = ell_derivatives(&m, &prior, &y, lambdas[best + 1]).unwrap();
        assert!(below < 0.0 && above > 0.0, "{below} {above}");
    }

    #[test]
    fn posterior_weights_normalise() {
        let m = two_bumps(20, 3);
        let prior = NoisePrior::log_uniform(0.05, 5.0).unwrap();
        let grid = SigmaGrid::for_prior(&prior, 128).unwrap();
        let y = m.sample(1, 2)[0].clone();
        let post = NoisePosterior::evaluate(&m, &prior, &y, &grid).unwrap();
        assert!((post.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let dens = post.density();
        let h = grid.log_step();
        let n = dens.len();
        let integral: f64 = (0..n)
            .map(|j| if j == 0 || j == n - 1 { 0.5 } else { 1.0 } * dens[j] * grid.nodes()[j])
            .sum::<f64>()
            * h;
        assert!((integral - 1.0).abs() < 1e-12);
    }

    #[test]
    fn concentrated_posterior_has_no_variance() {
        let d = 20_000;
        let m = GaussianMixture::uniform(vec![DVector::zeros(2)], DMatrix::zeros(2, 2))
            .unwrap()
            .embed(&SubspaceEmbedding::zero_padding(2, d).unwrap())
            .unwrap();
        let prior = NoisePrior::flat(0.1, 10.0).unwrap();
        let grid = SigmaGrid::log_uniform(0.1, 10.0, 16).unwrap();
        let y = pure_noise(d, grid.nodes()[7], 3);
        let post = NoisePosterior::evaluate(&m, &prior, &y, &grid).unwrap();
        assert!(post.weights()[7] > 1.0 - 1e-12);
        let mom = post.moments();
        assert!(mom.var_sigma < 1e-12 * mom.mean_sigma.powi(2));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let m = two_bumps(5, 1);
        let prior = NoisePrior::log_uniform(0.05, 5.0).unwrap();
        let grid = SigmaGrid::for_prior(&prior, 32).unwrap();
        let post = NoisePosterior::evaluate(&m, &prior, &m.means()[0], &grid).unwrap();
        let mut buf = Vec::new();
        post.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "sigma,log_post,normalized_density");
        assert_eq!(lines.len(), 33);
        assert!(post.log_posterior().iter().any(|v| *v == 0.0));
    }
}
