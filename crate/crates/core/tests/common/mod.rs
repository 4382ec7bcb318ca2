#![allow(dead_code)]

use bddm_core::{GaussianMixture, NoiseStream, SubspaceEmbedding};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn two_gaussians(d: usize) -> GaussianMixture {
    bddm_core::models::two_gaussians(d).unwrap()
}

pub fn gaussian_cov() -> DMatrix<f64> {
    bddm_core::models::correlated_cov()
}

pub fn gaussian(d: usize) -> GaussianMixture {
    bddm_core::models::correlated_gaussian(d).unwrap()
}

/// Random mixture with 1-3 components, support dimension 1-3, ambient
/// dimension up to 6, and a random offset.
pub fn random_mixture(seed: u64) -> GaussianMixture {
    let mut rng = NoiseStream::new(seed).rng(0);
    let k = rng.random_range(1..=3usize);
    let d = rng.random_range(k..=6usize);
    let n = rng.random_range(1..=3usize);
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let means: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_fn(k, |_, _| 2.0 * normal(&mut rng))).collect();
    let f = DMatrix::from_fn(k, k, |_, _| 0.6 * normal(&mut rng));
    let cov = &f * f.transpose() + DMatrix::identity(k, k) * 0.05;
    let mut weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let low = GaussianMixture::new(weights, means, cov).unwrap();
    let emb = SubspaceEmbedding::random(k, d, seed ^ 0xabc).unwrap();
    let offset = DVector::from_fn(d, |_, _| normal(&mut rng));
    let emb = SubspaceEmbedding::new(emb.basis().clone(), offset).unwrap();
    low.embed(&emb).unwrap()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
