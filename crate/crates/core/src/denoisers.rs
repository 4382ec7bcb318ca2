//! Denoisers behind one evaluation interface: the exact non-blind posterior
//! mean, the two analytic blind denoisers, and a trained network.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::nn::DenseNet;
use crate::noise_posterior::{mle_projected, MleEstimate, NoisePosterior, NoisePrior, SigmaGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiserKind {
    AnalyticNonBlind,
    AnalyticBlindMle,
    AnalyticBlindPosterior,
    TrainedNetwork,
}

impl DenoiserKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::AnalyticNonBlind => "analytic_nonblind",
            Self::AnalyticBlindMle => "analytic_blind_mle",
            Self::AnalyticBlindPosterior => "analytic_blind_posterior",
            Self::TrainedNetwork => "trained_network",
        }
    }
}

#[derive(Debug, Clone)]
pub enum DenoiserSpec {
    AnalyticNonBlind {
        model: Arc<GaussianMixture>,
    },
    AnalyticBlindMle {
        model: Arc<GaussianMixture>,
        prior: NoisePrior,
        grid: SigmaGrid,
    },
    AnalyticBlindPosterior {
        model: Arc<GaussianMixture>,
        prior: NoisePrior,
        grid: SigmaGrid,
    },
    /// A conditioned network takes `log sigma` as an extra input and is
    /// therefore non-blind.
    TrainedNetwork {
        net: Arc<DenseNet>,
    },
}

/// Output of a blind denoiser. `sigma_hat` is set only by the MLE kind.
#[derive(Debug, Clone)]
pub struct BlindOutput {
    pub denoised: DVector<f64>,
    pub sigma_hat: Option<MleEstimate>,
}

impl DenoiserSpec {
    pub fn nonblind(model: Arc<GaussianMixture>) -> Self {
        Self::AnalyticNonBlind { model }
    }

    pub fn blind_mle(model: Arc<GaussianMixture>, prior: NoisePrior, grid: SigmaGrid) -> Self {
        Self::AnalyticBlindMle { model, prior, grid }
    }

    pub fn blind_posterior(model: Arc<GaussianMixture>, prior: NoisePrior, grid: SigmaGrid) -> Self {
        Self::AnalyticBlindPosterior { model, prior, grid }
    }

    pub fn network(net: Arc<DenseNet>) -> Self {
        Self::TrainedNetwork { net }
    }

    pub fn kind(&self) -> DenoiserKind {
        match self {
            Self::AnalyticNonBlind { .. } => DenoiserKind::AnalyticNonBlind,
            Self::AnalyticBlindMle { .. } => DenoiserKind::AnalyticBlindMle,
            Self::AnalyticBlindPosterior { .. } => DenoiserKind::AnalyticBlindPosterior,
            Self::TrainedNetwork { .. } => DenoiserKind::TrainedNetwork,
        }
    }

    pub fn model(&self) -> Option<&GaussianMixture> {
        match self {
            Self::AnalyticNonBlind { model }
            | Self::AnalyticBlindMle { model, .. }
            | Self::AnalyticBlindPosterior { model, .. } => Some(model),
            Self::TrainedNetwork { .. } => None,
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            Self::TrainedNetwork { net } => net.data_dim(),
            _ => self.model().map(GaussianMixture::ambient_dim).unwrap_or(0),
        }
    }

    /// Accepts the noise level as an input.
    pub fn is_conditioned(&self) -> bool {
        match self {
            Self::AnalyticNonBlind { .. } => true,
            Self::TrainedNetwork { net } => net.is_conditioned(),
            _ => false,
        }
    }

    pub fn is_blind(&self) -> bool {
        !self.is_conditioned()
    }

    /// `f*(y, sigma) = E[X | X + sigma Z = y]`, or the network's prediction.
    pub fn denoise_nonblind(&self, y: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
        match self {
            Self::AnalyticNonBlind { model } => Ok(y + model.tweedie_shift(y, sigma)?),
            Self::TrainedNetwork { net } if net.is_conditioned() => net.denoise(y, Some(sigma)),
            _ => Err(Error::Unsupported(format!(
                "{} denoiser does not take a noise level",
                self.kind().name()
            ))),
        }
    }

    /// `f(y) = f*(y, sigma_hat)` with `sigma_hat` maximising the noise posterior.
    pub fn denoise_blind_mle(&self, y: &DVector<f64>) -> Result<(DVector<f64>, MleEstimate)> {
        match self {
            Self::AnalyticBlindMle { model, prior, grid } => {
                let p = model.project(y)?;
                let est = mle_projected(model, prior, &p, grid)?;
                let s2 = est.sigma * est.sigma;
                let (resp, _) = model.responsibilities(&p, s2);
                let v = model.local_shift(&p, s2, &resp);
                Ok((y + model.shift_from_local(&p, &v), est))
            }
            _ => Err(Error::Unsupported(format!("{} is not the MLE blind denoiser", self.kind().name()))),
        }
    }

    /// `f(y) = y + int sigma^2 grad log p_sigma(y) dmu(sigma | y)`.
    pub fn denoise_blind_posterior(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Self::AnalyticBlindPosterior { model, prior, grid } => {
                let p = model.project(y)?;
                let post = NoisePosterior::from_projected(model, prior, &p, grid)?;
                let mut v = DVector::zeros(model.intrinsic_dim());
                for (sigma, w) in post.nodes().iter().zip(post.weights()) {
                    if *w == 0.0 {
                        continue;
                    }
                    let s2 = sigma * sigma;
                    let (resp, _) = model.responsibilities(&p, s2);
                    v.axpy(*w, &model.local_shift(&p, s2, &resp), 1.0);
                }
                Ok(y + model.shift_from_local(&p, &v))
            }
            _ => Err(Error::Unsupported(format!(
                "{} is not the posterior-average blind denoiser",
                self.kind().name()
            ))),
        }
    }

    /// Any blind-capable kind.
    pub fn denoise_blind(&self, y: &DVector<f64>) -> Result<BlindOutput> {
        match self {
            Self::AnalyticBlindMle { .. } => {
                let (denoised, est) = self.denoise_blind_mle(y)?;
                Ok(BlindOutput { denoised, sigma_hat: Some(est) })
            }
            Self::AnalyticBlindPosterior { .. } => {
                Ok(BlindOutput { denoised: self.denoise_blind_posterior(y)?, sigma_hat: None })
            }
            Self::TrainedNetwork { net } if !net.is_conditioned() => {
                Ok(BlindOutput { denoised: net.denoise(y, None)?, sigma_hat: None })
            }
            _ => Err(Error::Unsupported(format!("{} denoiser is not blind", self.kind().name()))),
        }
    }
}

/// `sqrt(|denoised - y|^2 / d)`.
pub fn residual_sigma_estimate(denoised: &DVector<f64>, y: &DVector<f64>, d: usize) -> f64 {
    ((denoised - y).norm_squared() / d.max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::SubspaceEmbedding;
    use crate::rng::NoiseStream;
    use nalgebra::DMatrix;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn standard(d: usize) -> Arc<GaussianMixture> {
        Arc::new(GaussianMixture::uniform(vec![DVector::zeros(d)], DMatrix::identity(d, d)).unwrap())
    }

    fn two_bumps(d: usize) -> Arc<GaussianMixture> {
        let cov = DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.1]);
        let m = GaussianMixture::uniform(vec![dv(&[1.0, 0.5]), dv(&[-1.0, -0.5])], cov).unwrap();
        Arc::new(m.embed(&SubspaceEmbedding::random(2, d, 3).unwrap()).unwrap())
    }

    #[test]
    fn conjugate_gaussian_shrinks_by_half() {
        let f = DenoiserSpec::nonblind(standard(2));
        let out = f.denoise_nonblind(&dv(&[2.0, 0.0]), 1.0).unwrap();
        assert!((out - dv(&[1.0, 0.0])).amax() < 1e-14);
    }

    #[test]
    fn vanishing_noise_returns_input() {
        let f = DenoiserSpec::nonblind(standard(3));
        let y = dv(&[0.3, -1.2, 2.0]);
        assert!((f.denoise_nonblind(&y, 1e-6).unwrap() - &y).norm() <= 1e-4);
    }

    #[test]
    fn nonblind_matches_posterior_mean_and_tweedie() {
        let model = two_bumps(20);
        let f = DenoiserSpec::nonblind(model.clone());
        let s = NoiseStream::new(5);
        for i in 0..100u64 {
            let sigma = 0.05 + 0.02 * i as f64;
            let y = model.sample(1, i)[0].clone() + s.normal(i, 20) * sigma;
            let out = f.denoise_nonblind(&y, sigma).unwrap();
            let post_mean = model.posterior(&y, sigma).unwrap().mean();
            assert!((&out - post_mean).amax() < 1e-8);
            let tweedie = &y + model.noisy_score(&y, sigma).unwrap() * (sigma * sigma);
            assert!((&out - tweedie).amax() <= 1e-12 * (1.0 + y.amax()));
        }
    }

    #[test]
    fn blind_kinds_refuse_a_noise_level() {
        let model = two_bumps(5);
        let prior = NoisePrior::log_uniform(0.01, 10.0).unwrap();
        let grid = SigmaGrid::for_prior(&prior, 64).unwrap();
        let y = DVector::zeros(5);
        for f in [
            DenoiserSpec::blind_mle(model.clone(), prior, grid.clone()),
            DenoiserSpec::blind_posterior(model.clone(), prior, grid.clone()),
        ] {
            assert!(matches!(f.denoise_nonblind(&y, 0.3), Err(Error::Unsupported(_))));
            assert!(f.is_blind());
        }
        let nb = DenoiserSpec::nonblind(model);
        assert!(matches!(nb.denoise_blind(&y), Err(Error::Unsupported(_))));
        assert!(nb.denoise_blind_mle(&y).is_err());
    }

    #[test]
    fn mle_on_clean_support_point_clamps_to_floor() {
        let base = GaussianMixture::uniform(vec![DVector::zeros(2)], DMatrix::identity(2, 2) * 1e-8).unwrap();
        let model = Arc::new(base.embed(&SubspaceEmbedding::zero_padding(2, 50).unwrap()).unwrap());
        let prior = NoisePrior::flat(0.05, 5.0).unwrap();
        let grid = SigmaGrid::for_prior(&prior, 256).unwrap();
        let f = DenoiserSpec::blind_mle(model.clone(), prior, grid);
        let y = model.sample(1, 1)[0].clone();
        let (out, est) = f.denoise_blind_mle(&y).unwrap();
        assert_eq!(est.sigma, 0.05);
        assert!(est.at_boundary);
        assert!((out - &y).norm() < 1e-3);
    }

    #[test]
    fn concentrated_posterior_matches_nonblind_at_cell() {
        let d = 20_000;
        let base = GaussianMixture::uniform(vec![DVector::zeros(2)], DMatrix::identity(2, 2) * 0.5).unwrap();
        let model = Arc::new(base.embed(&SubspaceEmbedding::zero_padding(2, d).unwrap()).unwrap());
        let prior = NoisePrior::flat(0.1, 10.0).unwrap();
        let grid = SigmaGrid::log_uniform(0.1, 10.0, 16).unwrap();
        let target = grid.nodes()[6];
        let y = model.sample(1, 2)[0].clone() + NoiseStream::new(3).normal(0, d) * target;
        let post = NoisePosterior::evaluate(&model, &prior, &y, &grid).unwrap();
        let j = post.argmax();
        assert!(post.weights()[j] > 1.0 - 1e-9);
        let blind = DenoiserSpec::blind_posterior(model.clone(), prior, grid.clone()).denoise_blind_posterior(&y).unwrap();
        let fixed = DenoiserSpec::nonblind(model).denoise_nonblind(&y, grid.nodes()[j]).unwrap();
        assert!((blind - fixed).amax() < 1e-6);
    }

    #[test]
    fn residual_estimate_cases() {
        let y = dv(&[1.0, 2.0]);
        assert_eq!(residual_sigma_estimate(&y, &y, 2), 0.0);
        let d = 64;
        let z = NoiseStream::new(4).normal(0, d);
        let y = &z * ((d as f64).sqrt() / z.norm()) * 0.3;
        let point = Arc::new(GaussianMixture::uniform(vec![DVector::zeros(d)], DMatrix::zeros(d, d)).unwrap());
        let out = DenoiserSpec::nonblind(point).denoise_nonblind(&y, 0.3).unwrap();
        assert!(out.amax() == 0.0);
        assert!((residual_sigma_estimate(&out, &y, d) - 0.3).abs() < 1e-12);
    }
}
