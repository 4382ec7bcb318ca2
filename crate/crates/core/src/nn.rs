//! Dense rectifier network denoiser, trained on fresh mixture draws with the
//! clean-target loss `B^-1 sum |x_i - f(x_i + sigma_i z_i)|^2`, `sigma_i` drawn
//! from a noise prior.
//!
//! Batches are stored column-wise: a `d x B` matrix holds `B` samples.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::denoisers::DenoiserSpec;
use crate::error::{config_err, domain_err, Error, Result};
use crate::metrics::Estimate;
use crate::mixture::GaussianMixture;
use crate::noise_posterior::{NoisePrior, SigmaGrid};
use crate::rng::{derive_seed, NoiseStream};
use crate::schedules::DiffusionSchedule;

const BUNDLE_MAGIC: &[u8; 8] = b"BDDMNET1";

/// Affine maps applied before the first and after the last layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub log_sigma_mean: f64,
    pub log_sigma_scale: f64,
    pub output_mean: Vec<f64>,
    pub output_scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(d: usize) -> Self {
        Self {
            input_mean: vec![0.0; d],
            input_scale: vec![1.0; d],
            log_sigma_mean: 0.0,
            log_sigma_scale: 1.0,
            output_mean: vec![0.0; d],
            output_scale: vec![1.0; d],
        }
    }

    /// Statistics of the training distribution `x + sigma z`, `sigma ~ prior`.
    /// Output scale is pooled across coordinates so directions off the data
    /// support are not singled out.
    pub fn fit(model: &GaussianMixture, prior: &NoisePrior) -> Result<Self> {
        let d = model.ambient_dim();
        let mean: Vec<f64> = model.mean().iter().copied().collect();
        let cov = model.covariance();
        let noise_var = prior.moment(2.0);
        let input_scale = (0..d).map(|i| (cov[(i, i)] + noise_var).sqrt()).collect();

        let grid = SigmaGrid::for_prior(prior, 4096)?;
        let n = grid.len();
        let h = grid.log_step();
        let mut w = Vec::with_capacity(n);
        for (j, s) in grid.nodes().iter().enumerate() {
            let end = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
            w.push(end * h * prior.log_density(*s)?.exp() * s);
        }
        let total: f64 = w.iter().sum();
        let lm = grid.nodes().iter().zip(&w).map(|(s, w)| w * s.ln()).sum::<f64>() / total;
        let lv = grid.nodes().iter().zip(&w).map(|(s, w)| w * (s.ln() - lm).powi(2)).sum::<f64>() / total;

        let pooled = (cov.trace() / d as f64).sqrt();
        let out_scale = if pooled > 1e-12 { pooled } else { 1.0 };
        Ok(Self {
            input_mean: mean.clone(),
            input_scale,
            log_sigma_mean: lm,
            log_sigma_scale: if lv > 0.0 { lv.sqrt() } else { 1.0 },
            output_mean: mean,
            output_scale: vec![out_scale; d],
        })
    }

    fn check(&self, d: usize) -> Result<()> {
        let lens = [
            self.input_mean.len(),
            self.input_scale.len(),
            self.output_mean.len(),
            self.output_scale.len(),
        ];
        if lens.iter().any(|l| *l != d) {
            return config_err("normalization statistics do not match the data dimension");
        }
        let scales = self.input_scale.iter().chain(&self.output_scale).chain([&self.log_sigma_scale]);
        if scales.clone().any(|s| !(s.is_finite() && *s > 0.0)) {
            return config_err("normalization scales must be positive");
        }
        Ok(())
    }
}

/// Per-layer parameter gradients, same shapes as the network.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    norm: Normalization,
    conditioned: bool,
}

impl DenseNet {
    /// Rectifier net `d (+1) -> hidden... -> d`, uniform init in
    /// `+-1/sqrt(fan_in)`, identity normalization.
    pub fn new(data_dim: usize, hidden: &[usize], conditioned: bool, seed: u64) -> Result<Self> {
        if data_dim == 0 || hidden.iter().any(|w| *w == 0) {
            return config_err("layer widths must be positive");
        }
        let mut dims = vec![data_dim + usize::from(conditioned)];
        dims.extend_from_slice(hidden);
        dims.push(data_dim);
        let mut rng = NoiseStream::new(seed).rng(0);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let bound = 1.0 / (pair[0] as f64).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            weights.push(DMatrix::from_fn(pair[1], pair[0], |_, _| rng.sample(u)));
            biases.push(DVector::from_fn(pair[1], |_, _| rng.sample(u)));
        }
        Ok(Self { weights, biases, norm: Normalization::identity(data_dim), conditioned })
    }

    pub fn from_parts(
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        norm: Normalization,
        conditioned: bool,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return config_err("need one bias per weight matrix");
        }
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != b.len() {
                return config_err(format!("layer {i}: bias length {} != {} outputs", b.len(), w.nrows()));
            }
            if i > 0 && weights[i - 1].nrows() != w.ncols() {
                return config_err(format!("layer {i}: input width does not chain"));
            }
        }
        let d = weights[weights.len() - 1].nrows();
        if weights[0].ncols() != d + usize::from(conditioned) {
            return config_err("input width must be the data dimension (+1 when conditioned)");
        }
        norm.check(d)?;
        let net = Self { weights, biases, norm, conditioned };
        if net.params().iter().any(|v| !v.is_finite()) {
            return config_err("network parameters must be finite");
        }
        Ok(net)
    }

    pub fn with_normalization(mut self, norm: Normalization) -> Result<Self> {
        norm.check(self.data_dim())?;
        self.norm = norm;
        Ok(self)
    }

    pub fn data_dim(&self) -> usize {
        self.weights[self.weights.len() - 1].nrows()
    }

    pub fn is_conditioned(&self) -> bool {
        self.conditioned
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.weights[0].ncols()];
        dims.extend(self.weights.iter().map(|w| w.nrows()));
        dims
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().zip(&self.biases).map(|(w, b)| w.len() + b.len()).sum()
    }

    /// Parameters in layer order, each weight matrix column-major then its bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_params() {
            return config_err(format!("expected {} parameters, got {}", self.n_params(), values.len()));
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.len();
            w.as_mut_slice().copy_from_slice(&values[at..at + n]);
            at += n;
            let n = b.len();
            b.as_mut_slice().copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    fn input_matrix(&self, ys: &DMatrix<f64>, sigmas: Option<&[f64]>) -> Result<DMatrix<f64>> {
        let d = self.data_dim();
        if ys.nrows() != d {
            return domain_err(format!("input has {} rows, network expects {d}", ys.nrows()));
        }
        if ys.iter().any(|v| !v.is_finite()) {
            return domain_err("network input is not finite");
        }
        let b = ys.ncols();
        let rows = d + usize::from(self.conditioned);
        let mut a = DMatrix::zeros(rows, b);
        for c in 0..b {
            for r in 0..d {
                a[(r, c)] = (ys[(r, c)] - self.norm.input_mean[r]) / self.norm.input_scale[r];
            }
        }
        match (self.conditioned, sigmas) {
            (true, Some(s)) => {
                if s.len() != b || s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return domain_err("noise levels must be positive, one per sample");
                }
                for (c, sigma) in s.iter().enumerate() {
                    a[(d, c)] = (sigma.ln() - self.norm.log_sigma_mean) / self.norm.log_sigma_scale;
                }
            }
            (true, None) => return Err(Error::Unsupported("conditioned network needs a noise level".into())),
            (false, _) => {}
        }
        Ok(a)
    }

    /// Pre-activations of every layer; the last one is the raw output.
    fn pre_activations(&self, input: DMatrix<f64>) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let mut acts = vec![input];
        let mut pres = Vec::with_capacity(self.weights.len());
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &acts[i];
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if i < last {
                acts.push(z.map(|v| v.max(0.0)));
            }
            pres.push(z);
        }
        (acts, pres)
    }

    fn denormalize(&self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = raw.clone();
        for mut col in out.column_iter_mut() {
            for r in 0..col.len() {
                col[r] = col[r] * self.norm.output_scale[r] + self.norm.output_mean[r];
            }
        }
        out
    }

    /// Denoised batch; `sigmas` is required exactly when the net is conditioned.
    pub fn forward(&self, ys: &DMatrix<f64>, sigmas: Option<&[f64]>) -> Result<DMatrix<f64>> {
        let input = self.input_matrix(ys, sigmas)?;
        let (_, pres) = self.pre_activations(input);
        Ok(self.denormalize(&pres[pres.len() - 1]))
    }

    pub fn denoise(&self, y: &DVector<f64>, sigma: Option<f64>) -> Result<DVector<f64>> {
        let ys = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
        let s = sigma.map(|s| [s]);
        let out = self.forward(&ys, s.as_ref().map(|s| &s[..]))?;
        Ok(out.column(0).into_owned())
    }

    /// Mean over the batch of `|x - f(y)|^2`, and its gradient.
    pub fn loss_and_grad(
        &self,
        ys: &DMatrix<f64>,
        sigmas: Option<&[f64]>,
        targets: &DMatrix<f64>,
    ) -> Result<(f64, Gradients)> {
        if targets.shape() != ys.shape() {
            return domain_err("targets and inputs differ in shape");
        }
        let b = ys.ncols() as f64;
        let input = self.input_matrix(ys, sigmas)?;
        let (acts, pres) = self.pre_activations(input);
        let out = self.denormalize(&pres[pres.len() - 1]);
        let resid = out - targets;
        let loss = resid.norm_squared() / b;

        let mut delta = resid * (2.0 / b);
        for mut col in delta.column_iter_mut() {
            for r in 0..col.len() {
                col[r] *= self.norm.output_scale[r];
            }
        }
        let n = self.weights.len();
        let mut gw = vec![DMatrix::zeros(0, 0); n];
        let mut gb = vec![DVector::zeros(0); n];
        for l in (0..n).rev() {
            gw[l] = &delta * acts[l].transpose();
            gb[l] = delta.column_sum();
            if l > 0 {
                let mut back = self.weights[l].tr_mul(&delta);
                back.zip_apply(&pres[l - 1], |g, z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
                delta = back;
            }
        }
        Ok((loss, Gradients { weights: gw, biases: gb }))
    }
}

/// Adaptive-moment optimizer with decoupled weight decay (applied to weight
/// matrices, not biases).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    #[serde(skip)]
    first: Vec<f64>,
    #[serde(skip)]
    second: Vec<f64>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64, n_params: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
        }
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.first, &self.second)
    }

    fn update(&mut self, net: &mut DenseNet, grad: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps, wd) = (self.learning_rate, self.beta1, self.beta2, self.eps, self.weight_decay);
        let mut at = 0;
        let mut apply = |p: &mut [f64], g: &[f64], decay: bool, first: &mut [f64], second: &mut [f64]| {
            for i in 0..p.len() {
                let m = &mut first[at + i];
                let v = &mut second[at + i];
                *m = b1 * *m + (1.0 - b1) * g[i];
                *v = b2 * *v + (1.0 - b2) * g[i] * g[i];
                let step = (*m / c1) / ((*v / c2).sqrt() + eps);
                let decay_term = if decay { wd * p[i] } else { 0.0 };
                p[i] -= lr * (step + decay_term);
            }
            at += p.len();
        };
        for l in 0..net.weights.len() {
            apply(net.weights[l].as_mut_slice(), grad.weights[l].as_slice(), true, &mut self.first, &mut self.second);
            apply(net.biases[l].as_mut_slice(), grad.biases[l].as_slice(), false, &mut self.first, &mut self.second);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub n_steps: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub prior: NoisePrior,
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
}

fn default_log_every() -> u64 {
    100
}

impl TrainConfig {
    /// Batch 512, learning rate 1e-3, log-uniform prior on `[0.01, 10]`.
    pub fn new(n_steps: u64, seed: u64) -> Self {
        Self {
            batch_size: 512,
            n_steps,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            prior: NoisePrior::log_uniform(0.01, 10.0).expect("valid default prior"),
            seed,
            log_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return config_err("batch size and logging interval must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.weight_decay >= 0.0) {
            return config_err("learning rate must be positive and weight decay nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    /// Mean batch loss over the logging window ending at `step`.
    pub loss: f64,
}

/// A network plus optimizer state that can be advanced and resumed.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: DenseNet,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub history: Vec<LossRecord>,
    window: (f64, u64),
}

impl Trainer {
    pub fn new(net: DenseNet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(config.learning_rate, config.weight_decay, net.n_params());
        Ok(Self { net, optimizer, config, history: Vec::new(), window: (0.0, 0) })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// Training batch for step `step`, drawn from its own sub-stream.
    pub fn batch(model: &GaussianMixture, config: &TrainConfig, step: u64) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
        let d = model.ambient_dim();
        let b = config.batch_size;
        let mut rng = NoiseStream::new(config.seed).rng(step + 1);
        let mut ys = DMatrix::zeros(d, b);
        let mut xs = DMatrix::zeros(d, b);
        let mut sigmas = Vec::with_capacity(b);
        for c in 0..b {
            let (_, x) = model.sample_one(&mut rng);
            let sigma = config.prior.sample(&mut rng);
            for r in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                xs[(r, c)] = x[r];
                ys[(r, c)] = x[r] + sigma * z;
            }
            sigmas.push(sigma);
        }
        (ys, xs, sigmas)
    }

    /// Runs until `n_steps` total optimizer steps have been taken.
    pub fn run(&mut self, model: &GaussianMixture, n_steps: u64) -> Result<()> {
        if model.ambient_dim() != self.net.data_dim() {
            return config_err("model and network dimensions differ");
        }
        while self.optimizer.step < n_steps {
            let step = self.optimizer.step;
            let (ys, xs, sigmas) = Self::batch(model, &self.config, step);
            let cond = self.net.conditioned.then_some(&sigmas[..]);
            let (loss, grad) = self.net.loss_and_grad(&ys, cond, &xs)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("training loss diverged at step {step}: {loss}")));
            }
            self.optimizer.update(&mut self.net, &grad);
            self.window.0 += loss;
            self.window.1 += 1;
            if self.optimizer.step % self.config.log_every == 0 {
                self.history.push(LossRecord { step: self.optimizer.step, loss: self.window.0 / self.window.1 as f64 });
                self.window = (0.0, 0);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bundle(std::fs::File::create(path)?, &self.net, Some(self))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (_, trainer) = read_bundle(std::fs::File::open(path)?)?;
        trainer.ok_or_else(|| Error::Config("bundle holds no optimizer state".into()))
    }
}

/// Trains a network with fresh draws from `model` and returns it with its
/// optimizer state and loss history. Normalization statistics are fitted to
/// the training distribution first.
pub fn train_blind(model: &GaussianMixture, net: DenseNet, config: TrainConfig) -> Result<Trainer> {
    let net = net.with_normalization(Normalization::fit(model, &config.prior)?)?;
    let steps = config.n_steps;
    let mut trainer = Trainer::new(net, config)?;
    trainer.run(model, steps)?;
    Ok(trainer)
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleHeader {
    layer_dims: Vec<usize>,
    conditioned: bool,
    normalization: Normalization,
    layout: String,
    n_params: usize,
    optimizer: Option<AdamW>,
    config: Option<TrainConfig>,
    history: Vec<LossRecord>,
    /// Loss sum and count of the logging window still open at save time.
    #[serde(default)]
    open_window: (f64, u64),
}

fn write_bundle<W: Write>(mut out: W, net: &DenseNet, trainer: Option<&Trainer>) -> Result<()> {
    let header = BundleHeader {
        layer_dims: net.layer_dims(),
        conditioned: net.conditioned,
        normalization: net.norm.clone(),
        layout: "per layer: weight column-major, then bias; then optimizer first and second moments".into(),
        n_params: net.n_params(),
        optimizer: trainer.map(|t| t.optimizer.clone()),
        config: trainer.map(|t| t.config.clone()),
        history: trainer.map(|t| t.history.clone()).unwrap_or_default(),
        open_window: trainer.map(|t| t.window).unwrap_or_default(),
    };
    let text = serde_json::to_vec(&header)?;
    out.write_all(BUNDLE_MAGIC)?;
    out.write_all(&(text.len() as u64).to_le_bytes())?;
    out.write_all(&text)?;
    let mut blob = Vec::with_capacity(8 * net.n_params() * 3);
    let mut push = |vals: &[f64]| {
        for v in vals {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    push(&net.params());
    if let Some(t) = trainer {
        push(&t.optimizer.first);
        push(&t.optimizer.second);
    }
    out.write_all(&blob)?;
    Ok(())
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
}

fn read_bundle<R: Read>(mut input: R) -> Result<(DenseNet, Option<Trainer>)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != BUNDLE_MAGIC {
        return config_err("not a network bundle");
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut text = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut text)?;
    let header: BundleHeader = serde_json::from_slice(&text)?;
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    let n = header.n_params;
    let expected = if header.optimizer.is_some() { 3 * n } else { n };
    if rest.len() != 8 * expected {
        return config_err(format!("bundle blob has {} bytes, expected {}", rest.len(), 8 * expected));
    }
    let values = read_f64s(&rest);
    let dims = &header.layer_dims;
    if dims.len() < 2 {
        return config_err("bundle needs at least one layer");
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut at = 0;
    for pair in dims.windows(2) {
        let nw = pair[0] * pair[1];
        if at + nw + pair[1] > n {
            return config_err("bundle layer sizes exceed parameter count");
        }
        weights.push(DMatrix::from_column_slice(pair[1], pair[0], &values[at..at + nw]));
        at += nw;
        biases.push(DVector::from_column_slice(&values[at..at + pair[1]]));
        at += pair[1];
    }
    if at != n {
        return config_err("bundle parameter count does not match layer sizes");
    }
    let net = DenseNet::from_parts(weights, biases, header.normalization, header.conditioned)?;
    let trainer = match (header.optimizer, header.config) {
        (Some(mut opt), Some(config)) => {
            opt.first = values[n..2 * n].to_vec();
            opt.second = values[2 * n..3 * n].to_vec();
            Some(Trainer { net: net.clone(), optimizer: opt, config, history: header.history, window: header.open_window })
        }
        _ => None,
    };
    Ok((net, trainer))
}

pub fn save_network(net: &DenseNet, path: impl AsRef<Path>) -> Result<()> {
    write_bundle(std::fs::File::create(path)?, net, None)
}

/// Loads the network from a bundle written by [`save_network`] or [`Trainer::save`].
pub fn load_network(path: impl AsRef<Path>) -> Result<DenseNet> {
    Ok(read_bundle(std::fs::File::open(path)?)?.0)
}

pub fn network_to_bytes(net: &DenseNet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_bundle(&mut out, net, None)?;
    Ok(out)
}

pub fn network_from_bytes(bytes: &[u8]) -> Result<DenseNet> {
    Ok(read_bundle(bytes)?.0)
}

fn blind_gap(f_hat: &DenoiserSpec, reference: &DenoiserSpec, y: &DVector<f64>) -> Result<f64> {
    let a = f_hat.denoise_blind(y)?.denoised;
    let b = reference.denoise_blind_posterior(y)?;
    Ok((a - b).norm_squared())
}

/// `E |f_hat(y) - f*(y)|^2` over `x ~ model`, `sigma ~ prior`, `y = x + sigma z`,
/// where `f*` is the posterior-average blind denoiser for the same prior.
pub fn excess_risk(
    f_hat: &DenoiserSpec,
    model: &GaussianMixture,
    prior: &NoisePrior,
    grid: &SigmaGrid,
    n_mc: usize,
    seed: u64,
) -> Result<Estimate> {
    let reference = DenoiserSpec::blind_posterior(std::sync::Arc::new(model.clone()), *prior, grid.clone());
    let d = model.ambient_dim();
    let mut vals = Vec::with_capacity(n_mc);
    for i in 0..n_mc as u64 {
        let mut rng = NoiseStream::new(derive_seed(seed, i)).rng(0);
        let (_, x) = model.sample_one(&mut rng);
        let sigma = prior.sample(&mut rng);
        let y = x + DVector::from_fn(d, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
        vals.push(blind_gap(f_hat, &reference, &y)?);
    }
    Ok(Estimate::from_samples(&vals))
}

/// Time-domain form of the same error along the proportional schedule
/// `a_t = ratio sigma_t^2`: `int a_t^-1 E_{p_sigma_t} |f_hat - f*|^2 dt` over
/// `[0, T]` with `sigma_T` the prior floor, by the trapezoid rule on `n_t`
/// equally spaced times with `n_mc` draws each.
pub fn trajectory_weighted_error(
    f_hat: &DenoiserSpec,
    model: &GaussianMixture,
    prior: &NoisePrior,
    grid: &SigmaGrid,
    ratio: f64,
    n_t: usize,
    n_mc: usize,
    seed: u64,
) -> Result<Estimate> {
    if n_t < 2 {
        return config_err("need at least two time nodes");
    }
    let schedule = DiffusionSchedule::proportional(ratio, prior.sigma_max())?;
    let t_end = schedule.terminal_time(prior.sigma_min())?;
    let reference = DenoiserSpec::blind_posterior(std::sync::Arc::new(model.clone()), *prior, grid.clone());
    let d = model.ambient_dim();
    let h = t_end / (n_t - 1) as f64;
    let mut total = 0.0;
    let mut var = 0.0;
    for j in 0..n_t {
        let t = h * j as f64;
        let sigma = schedule.implicit_sigma(t)?.clamp(prior.sigma_min(), prior.sigma_max());
        let mut vals = Vec::with_capacity(n_mc);
        for i in 0..n_mc as u64 {
            let mut rng = NoiseStream::new(derive_seed(seed, j as u64 * n_mc as u64 + i)).rng(0);
            let (_, x) = model.sample_one(&mut rng);
            let y = x + DVector::from_fn(d, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
            vals.push(blind_gap(f_hat, &reference, &y)?);
        }
        let e = Estimate::from_samples(&vals);
        let wt = if j == 0 || j == n_t - 1 { 0.5 } else { 1.0 } * h / (ratio * sigma * sigma);
        total += wt * e.mean;
        var += (wt * e.std_err).powi(2);
    }
    Ok(Estimate { mean: total, std_err: var.sqrt() })
}
