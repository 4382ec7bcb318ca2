//! Blind denoising diffusion models on synthetic Gaussian-mixture data.
//!
//! The crate is organised bottom-up:
//!
//! * [`mixture`]: the data model, its noisy densities, scores and exact posteriors.
//! * [`models`]: the two standard experiment models.
//! * [`noise_posterior`]: priors over the noise level and the posterior over
//!   the noise level given one noisy observation.
//! * [`denoisers`]: non-blind, blind-MLE, blind posterior-average and trained denoisers.
//! * [`schedules`]: implicit noise schedules and diffusion-coefficient families.
//! * [`samplers`]: blind and non-blind reverse-time samplers.
//! * [`nn`]: a dense feedforward denoiser with its training loop.
//! * [`metrics`]: PSNR, Gaussian W2, projected W1 and early-stopping gaps.

pub mod denoisers;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod mixture;
pub mod models;
pub mod nn;
pub mod noise_posterior;
pub mod rng;
pub mod samplers;
pub mod schedules;

pub use denoisers::{DenoiserKind, DenoiserSpec};
pub use error::{Error, Result};
pub use mixture::{GaussianMixture, MixtureFile, SubspaceEmbedding};
pub use noise_posterior::{MleEstimate, NoisePosterior, NoisePrior, SigmaGrid};
pub use metrics::Estimate;
pub use nn::{DenseNet, TrainConfig};
pub use rng::NoiseStream;
pub use samplers::{Diffusion, Integrator, SamplerConfig, Trajectory};
pub use schedules::{DiffusionSchedule, ExplicitSchedule};
