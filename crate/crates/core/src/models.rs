//! The two data models used throughout the experiments.
//!
//! Both live on a 2-dim subspace placed by `SubspaceEmbedding::random(2, d, 7)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{config_err, Result};
use crate::mixture::{GaussianMixture, SubspaceEmbedding};

/// Seed of the random orthonormal embedding shared by the standard models.
pub const EMBEDDING_SEED: u64 = 7;

/// Two equal-weight components at `(+-2, 0)` with covariance `0.25 I` in
/// the support. At `d = 2` the model is left unrotated.
pub fn two_gaussians(ambient_dim: usize) -> Result<GaussianMixture> {
    if ambient_dim < 2 {
        return config_err("the two-component model needs ambient dimension >= 2");
    }
    let low = GaussianMixture::uniform(
        vec![DVector::from_column_slice(&[2.0, 0.0]), DVector::from_column_slice(&[-2.0, 0.0])],
        DMatrix::identity(2, 2) * 0.25,
    )?;
    if ambient_dim == 2 {
        return Ok(low);
    }
    low.embed(&SubspaceEmbedding::random(2, ambient_dim, EMBEDDING_SEED)?)
}

pub fn correlated_cov() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5])
}

/// Zero-mean Gaussian with covariance [`correlated_cov`] in the support.
pub fn correlated_gaussian(ambient_dim: usize) -> Result<GaussianMixture> {
    if ambient_dim < 2 {
        return config_err("the Gaussian model needs ambient dimension >= 2");
    }
    GaussianMixture::uniform(vec![DVector::zeros(2)], correlated_cov())?
        .embed(&SubspaceEmbedding::random(2, ambient_dim, EMBEDDING_SEED)?)
}
