//! Gaussian mixtures with a shared covariance supported on a low-dimensional
//! affine subspace.
//!
//! A mixture `sum_i w_i N(m_i, S)` in `R^d` is stored through the spectral
//! factorization of `S` restricted to its support: `S = Q diag(s) Q^T` with
//! `Q` a `d x k` orthonormal basis, and every mean written as
//! `m_i = offset + Q c_i`. Densities, scores and posteriors of the noisy
//! observation `Y = X + sigma Z` then cost `O(dk)` per point instead of a
//! `d x d` factorization: `S + sigma^2 I` is diagonal in the basis `[Q, Q_perp]`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_err, Error, Result};
use crate::linalg::{column_span, extend_orthonormal, log_sum_exp, psd_eigen};
use crate::rng::NoiseStream;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Isometric embedding `c -> basis * c + offset` of `R^k` into `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceEmbedding {
    basis: DMatrix<f64>,
    offset: DVector<f64>,
}

impl SubspaceEmbedding {
    pub fn new(basis: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        if basis.nrows() != offset.len() {
            return config_err(format!(
                "basis has {} rows but offset has length {}",
                basis.nrows(),
                offset.len()
            ));
        }
        if basis.ncols() > basis.nrows() {
            return config_err("embedding basis has more columns than rows");
        }
        let gram = basis.transpose() * &basis;
        let k = basis.ncols();
        if (gram - DMatrix::identity(k, k)).amax() > 1e-10 {
            return config_err("embedding basis columns are not orthonormal");
        }
        Ok(Self { basis, offset })
    }

    pub fn identity(d: usize) -> Self {
        Self { basis: DMatrix::identity(d, d), offset: DVector::zeros(d) }
    }

    /// First `k` standard basis vectors of `R^d` (data padded with zeros).
    pub fn zero_padding(k: usize, d: usize) -> Result<Self> {
        if k > d {
            return config_err(format!("cannot pad dimension {k} into {d}"));
        }
        Ok(Self { basis: DMatrix::identity(d, k), offset: DVector::zeros(d) })
    }

    /// Uniformly random `k`-dimensional linear subspace of `R^d`.
    pub fn random(k: usize, d: usize, seed: u64) -> Result<Self> {
        if k > d {
            return config_err(format!("cannot embed dimension {k} into {d}"));
        }
        let stream = NoiseStream::new(seed);
        let mut rng = stream.rng(0);
        let g = DMatrix::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
        let q = g.qr().q();
        Ok(Self { basis: q, offset: DVector::zeros(d) })
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Subspace coordinates `basis^T (x - offset)`.
    pub fn coordinates(&self, x: &DVector<f64>) -> DVector<f64> {
        self.basis.tr_mul(&(x - &self.offset))
    }

    pub fn embed_point(&self, coords: &DVector<f64>) -> DVector<f64> {
        &self.basis * coords + &self.offset
    }

    /// Orthogonal projection onto the affine subspace.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        self.embed_point(&self.coordinates(x))
    }

    /// Distance from `x` to the affine subspace.
    pub fn residual_norm(&self, x: &DVector<f64>) -> f64 {
        (x - self.project(x)).norm()
    }
}

/// A noisy observation decomposed along the support of a mixture.
#[derive(Debug, Clone)]
pub(crate) struct Projected {
    /// `Q^T (y - offset)`.
    pub local: DVector<f64>,
    /// Component of `y - offset` orthogonal to the support.
    pub perp: DVector<f64>,
    pub perp_sq: f64,
}

/// Mixture of Gaussians `sum_i w_i N(m_i, S)` with a shared covariance `S`.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    factor: DMatrix<f64>,
    offset: DVector<f64>,
    basis: DMatrix<f64>,
    variances: DVector<f64>,
    coords: Vec<DVector<f64>>,
}

fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return config_err("mixture needs at least one component");
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return config_err("mixture weights must be finite and nonnegative");
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return config_err(format!("mixture weights sum to {total}, not 1"));
    }
    Ok(())
}

impl GaussianMixture {
    /// Builds a mixture from its means and a dense covariance `S`.
    ///
    /// The intrinsic dimension is the rank of the span of the covariance range
    /// and the centred means (centred on the weighted mean).
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, base_cov: DMatrix<f64>) -> Result<Self> {
        validate_weights(&weights)?;
        let d = base_cov.nrows();
        if !base_cov.is_square() {
            return config_err("base covariance is not square");
        }
        if means.len() != weights.len() || means.iter().any(|m| m.len() != d) {
            return config_err("means do not match weights or covariance dimension");
        }
        let (vals, vecs) = psd_eigen(&base_cov, 1e-10)?;
        let scale = vals.max().max(1.0);
        let keep: Vec<usize> = (0..d).filter(|&i| vals[i] > 1e-12 * scale).collect();
        let mut factor = DMatrix::from_fn(d, keep.len(), |r, c| vecs[(r, keep[c])] * vals[keep[c]].sqrt());

        let mut offset = DVector::zeros(d);
        for (w, m) in weights.iter().zip(&means) {
            offset.axpy(*w, m, 1.0);
        }
        let k = column_span(&Self::span_matrix(&factor, &means, &offset), 1e-10).ncols();
        if k > factor.ncols() {
            factor = factor.resize_horizontally(k, 0.0);
        }
        Self::from_factor(weights, means, factor, offset)
    }

    /// Builds a mixture from a `d x k` factor `F` with `S = F F^T`. The means
    /// must lie in the affine subspace `offset + span` of dimension `k`.
    pub fn from_factor(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        factor: DMatrix<f64>,
        offset: DVector<f64>,
    ) -> Result<Self> {
        validate_weights(&weights)?;
        let d = offset.len();
        let k = factor.ncols();
        if factor.nrows() != d {
            return config_err(format!("factor has {} rows, expected {d}", factor.nrows()));
        }
        if k > d {
            return config_err("intrinsic dimension exceeds ambient dimension");
        }
        if means.len() != weights.len() || means.iter().any(|m| m.len() != d) {
            return config_err("means do not match weights or ambient dimension");
        }
        if factor.iter().chain(offset.iter()).chain(means.iter().flat_map(|m| m.iter())).any(|v| !v.is_finite()) {
            return config_err("mixture parameters must be finite");
        }

        let span = column_span(&Self::span_matrix(&factor, &means, &offset), 1e-10);
        if span.ncols() > k {
            return config_err(format!(
                "means and covariance span {} dimensions, more than k = {k}",
                span.ncols()
            ));
        }
        let span = extend_orthonormal(&span, k);
        let local_factor = span.tr_mul(&factor);
        let local_cov = &local_factor * local_factor.transpose();
        let (variances, rotation) = psd_eigen(&local_cov, 1e-10)?;
        let basis = span * rotation;

        let coords: Vec<DVector<f64>> = means.iter().map(|m| basis.tr_mul(&(m - &offset))).collect();
        for (m, c) in means.iter().zip(&coords) {
            let centred = m - &offset;
            if (&centred - &basis * c).norm() > 1e-10 * (1.0 + centred.norm()) {
                return config_err("a mean lies outside the support subspace");
            }
        }
        if (&factor - &basis * basis.tr_mul(&factor)).norm() > 1e-10 * (1.0 + factor.norm()) {
            return config_err("covariance range lies outside the support subspace");
        }

        Ok(Self::from_parts(weights, means, factor, offset, basis, variances, coords))
    }

    fn span_matrix(factor: &DMatrix<f64>, means: &[DVector<f64>], offset: &DVector<f64>) -> DMatrix<f64> {
        let mut cols: Vec<DVector<f64>> = factor.column_iter().map(|c| c.into_owned()).collect();
        cols.extend(means.iter().map(|m| m - offset));
        if cols.is_empty() {
            return DMatrix::zeros(offset.len(), 0);
        }
        DMatrix::from_columns(&cols)
    }

    fn from_parts(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        factor: DMatrix<f64>,
        offset: DVector<f64>,
        basis: DMatrix<f64>,
        variances: DVector<f64>,
        coords: Vec<DVector<f64>>,
    ) -> Self {
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Self { weights, log_weights, means, factor, offset, basis, variances, coords }
    }

    /// Builds a mixture in canonical form: means `offset + basis c_i`,
    /// covariance `basis diag(variances) basis^T`.
    fn canonical(
        weights: Vec<f64>,
        offset: DVector<f64>,
        basis: DMatrix<f64>,
        variances: DVector<f64>,
        coords: Vec<DVector<f64>>,
    ) -> Self {
        let means = coords.iter().map(|c| &basis * c + &offset).collect();
        let factor = &basis * DMatrix::from_diagonal(&variances.map(f64::sqrt));
        Self::from_parts(weights, means, factor, offset, basis, variances, coords)
    }

    /// Equal-weight mixture of Gaussians `N(c_i, cov)` in `R^k`.
    pub fn uniform(means: Vec<DVector<f64>>, cov: DMatrix<f64>) -> Result<Self> {
        let n = means.len();
        if n == 0 {
            return config_err("mixture needs at least one component");
        }
        let mut weights = vec![1.0 / n as f64; n];
        // make the weights sum to exactly 1 in floating point
        let rest: f64 = weights[1..].iter().sum();
        weights[0] = 1.0 - rest;
        Self::new(weights, means, cov)
    }

    /// Pushes the mixture forward through an embedding `R^k -> R^d`.
    pub fn embed(&self, embedding: &SubspaceEmbedding) -> Result<Self> {
        if self.ambient_dim() != embedding.intrinsic_dim() {
            return config_err(format!(
                "mixture lives in R^{} but the embedding expects R^{}",
                self.ambient_dim(),
                embedding.intrinsic_dim()
            ));
        }
        let b = embedding.basis();
        let offset = b * &self.offset + embedding.offset();
        let means = self.means.iter().map(|m| b * m + embedding.offset()).collect();
        // Rebuilt from the factor so a model and its JSON round trip share
        // one spectral factorisation.
        Self::from_factor(self.weights.clone(), means, b * &self.factor, offset)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    /// Dense shared covariance `S = F F^T`.
    pub fn base_cov(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }

    /// `d x k` factor `F` with `S = F F^T`.
    pub fn base_cov_factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.offset.len()
    }

    /// Eigenvalues of `S` along [`Self::support`]'s basis.
    pub fn support_variances(&self) -> &DVector<f64> {
        &self.variances
    }

    /// Affine subspace containing every sample, with an eigenbasis of `S`.
    pub fn support(&self) -> SubspaceEmbedding {
        SubspaceEmbedding { basis: self.basis.clone(), offset: self.offset.clone() }
    }

    /// Weighted mean of the component means.
    pub fn mean(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.ambient_dim());
        for (w, m) in self.weights.iter().zip(&self.means) {
            out.axpy(*w, m, 1.0);
        }
        out
    }

    /// `E ||X||^2` under the mixture.
    pub fn second_moment(&self) -> f64 {
        let tr = self.variances.sum();
        self.weights.iter().zip(&self.means).map(|(w, m)| w * (m.norm_squared() + tr)).sum()
    }

    fn check_point(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.ambient_dim() {
            return Err(Error::Config(format!(
                "point has dimension {}, model has {}",
                y.len(),
                self.ambient_dim()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return domain_err("point has non-finite coordinates");
        }
        Ok(())
    }

    fn check_sigma(sigma: f64) -> Result<()> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return domain_err(format!("noise level must be positive and finite, got {sigma}"));
        }
        Ok(())
    }

    pub(crate) fn project(&self, y: &DVector<f64>) -> Result<Projected> {
        self.check_point(y)?;
        let centred = y - &self.offset;
        let local = self.basis.tr_mul(&centred);
        let perp = centred - &self.basis * &local;
        let perp_sq = perp.norm_squared();
        Ok(Projected { local, perp, perp_sq })
    }

    /// Per-component `log w_i + log N(y; m_i, S + s2 I)`.
    pub(crate) fn log_components(&self, p: &Projected, s2: f64) -> Vec<f64> {
        let d = self.ambient_dim();
        let k = self.intrinsic_dim();
        let mut log_det = (d - k) as f64 * s2.ln();
        for v in self.variances.iter() {
            log_det += (v + s2).ln();
        }
        let base = d as f64 * LN_2PI + log_det + p.perp_sq / s2;
        self.coords
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| {
                let quad: f64 = (0..k)
                    .map(|j| {
                        let r = p.local[j] - c[j];
                        r * r / (self.variances[j] + s2)
                    })
                    .sum();
                lw - 0.5 * (base + quad)
            })
            .collect()
    }

    /// Posterior component responsibilities and `log p_sigma(y)`.
    pub(crate) fn responsibilities(&self, p: &Projected, s2: f64) -> (Vec<f64>, f64) {
        let mut terms = self.log_components(p, s2);
        let lse = crate::linalg::softmax_in_place(&mut terms);
        (terms, lse)
    }

    /// In-support part `v` of the Tweedie shift: `s2 grad log p = -perp - Q v`.
    pub(crate) fn local_shift(&self, p: &Projected, s2: f64, resp: &[f64]) -> DVector<f64> {
        let k = self.intrinsic_dim();
        let mut v = DVector::zeros(k);
        for (c, w) in self.coords.iter().zip(resp) {
            if *w == 0.0 {
                continue;
            }
            for j in 0..k {
                v[j] += w * (p.local[j] - c[j]) * s2 / (self.variances[j] + s2);
            }
        }
        v
    }

    pub(crate) fn shift_from_local(&self, p: &Projected, v: &DVector<f64>) -> DVector<f64> {
        -(&p.perp + &self.basis * v)
    }

    /// `log p_sigma(y)` for `p_sigma = p * N(0, sigma^2 I)`.
    pub fn noisy_log_density(&self, y: &DVector<f64>, sigma: f64) -> Result<f64> {
        Self::check_sigma(sigma)?;
        let p = self.project(y)?;
        Ok(log_sum_exp(&self.log_components(&p, sigma * sigma)))
    }

    /// `sigma^2 grad log p_sigma(y) = E[X | Y = y] - y`.
    pub fn tweedie_shift(&self, y: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
        Self::check_sigma(sigma)?;
        let p = self.project(y)?;
        let s2 = sigma * sigma;
        let (resp, _) = self.responsibilities(&p, s2);
        let v = self.local_shift(&p, s2, &resp);
        Ok(self.shift_from_local(&p, &v))
    }

    /// Score `grad log p_sigma(y)`.
    pub fn noisy_score(&self, y: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
        Ok(self.tweedie_shift(y, sigma)? / (sigma * sigma))
    }

    /// Exact law of `X` given `Y = y` when `Y = X + sigma Z`.
    pub fn posterior(&self, y: &DVector<f64>, sigma: f64) -> Result<GaussianMixture> {
        Self::check_sigma(sigma)?;
        let p = self.project(y)?;
        let s2 = sigma * sigma;
        let (resp, _) = self.responsibilities(&p, s2);
        let gain = self.variances.map(|v| v / (v + s2));
        let coords = self
            .coords
            .iter()
            .map(|c| c + gain.component_mul(&(&p.local - c)))
            .collect();
        let variances = self.variances.map(|v| v * s2 / (v + s2));
        Ok(Self::canonical(resp, self.offset.clone(), self.basis.clone(), variances, coords))
    }

    /// Mean and variance of `||X - y||^2` for `X` drawn from this mixture.
    pub fn squared_distance_moments(&self, y: &DVector<f64>) -> Result<(f64, f64)> {
        self.check_point(y)?;
        let tr = self.variances.sum();
        let tr_sq = self.variances.map(|v| v * v).sum();
        let mut first = 0.0;
        let mut second = 0.0;
        for (w, m) in self.weights.iter().zip(&self.means) {
            if *w == 0.0 {
                continue;
            }
            let b = m - y;
            let local = self.basis.tr_mul(&b);
            let cb: f64 = (0..self.intrinsic_dim()).map(|j| self.variances[j] * local[j] * local[j]).sum();
            let mean_i = b.norm_squared() + tr;
            let var_i = 2.0 * tr_sq + 4.0 * cb;
            first += w * mean_i;
            second += w * (var_i + mean_i * mean_i);
        }
        Ok((first, (second - first * first).max(0.0)))
    }

    /// `tr Cov(X)` without forming the ambient covariance.
    pub fn total_variance(&self) -> f64 {
        let mean = self.mean();
        self.variances.sum() + self.weights.iter().zip(&self.means).map(|(w, m)| w * (m - &mean).norm_squared()).sum::<f64>()
    }

    /// Covariance of the mixture, `S + sum_i w_i (m_i - m)(m_i - m)^T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut cov = self.base_cov();
        for (w, m) in self.weights.iter().zip(&self.means) {
            let c = m - &mean;
            cov.ger(*w, &c, &c, 1.0);
        }
        cov
    }

    /// Draws one point. Samples are formed in support coordinates and
    /// embedded, so they lie on the support subspace.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, DVector<f64>) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        let k = self.intrinsic_dim();
        let local = DVector::from_fn(k, |j, _| {
            let z: f64 = StandardNormal.sample(rng);
            self.coords[idx][j] + self.variances[j].sqrt() * z
        });
        (idx, &self.basis * local + &self.offset)
    }

    /// `n` i.i.d. draws from the stream keyed by `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<DVector<f64>> {
        self.sample_labeled(n, seed).into_iter().map(|(_, x)| x).collect()
    }

    /// Like [`Self::sample`], also returning the component index of each draw.
    pub fn sample_labeled(&self, n: usize, seed: u64) -> Vec<(usize, DVector<f64>)> {
        let mut rng = NoiseStream::new(seed).rng(0);
        (0..n).map(|_| self.sample_one(&mut rng)).collect()
    }

    /// Index of the component with the largest responsibility for a clean point.
    pub fn nearest_component(&self, x: &DVector<f64>) -> Result<usize> {
        let p = self.project(x)?;
        let terms = self.log_components(&p, 1e-12);
        Ok(terms
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if *v > best.1 { (i, *v) } else { best })
            .0)
    }

    pub fn to_file(&self) -> MixtureFile {
        MixtureFile {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().copied().collect()).collect(),
            base_cov_factor: self.factor.row_iter().map(|r| r.iter().copied().collect()).collect(),
            offset: self.offset.iter().copied().collect(),
            k: self.intrinsic_dim(),
            d: self.ambient_dim(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MixtureFile = serde_json::from_str(text)?;
        file.build()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk model description. `base_cov_factor` is the `d x k` factor `F`
/// with `S = F F^T`, stored row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFile {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub base_cov_factor: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    pub k: usize,
    pub d: usize,
}

impl MixtureFile {
    pub fn build(&self) -> Result<GaussianMixture> {
        let (d, k) = (self.d, self.k);
        if self.offset.len() != d || self.base_cov_factor.len() != d {
            return config_err("model file: offset or factor does not have d rows");
        }
        if self.base_cov_factor.iter().any(|r| r.len() != k) {
            return config_err("model file: factor rows must have k entries");
        }
        if self.means.iter().any(|m| m.len() != d) {
            return config_err("model file: means must have d entries");
        }
        let factor = DMatrix::from_fn(d, k, |r, c| self.base_cov_factor[r][c]);
        let means = self.means.iter().map(|m| DVector::from_column_slice(m)).collect();
        GaussianMixture::from_factor(
            self.weights.clone(),
            means,
            factor,
            DVector::from_column_slice(&self.offset),
        )
    }
}
