//! A small fully-connected classifier with manual backprop, optional batch
//! normalization, and pluggable noise.
//!
//! Each layer computes, in order:
//!
//! ```text
//! h̃ = noise(h)          if the noise site is `input`
//! z = h̃ Wᵀ + b
//! z̃ = noise(z)          if the noise site is `pre-norm`
//! u = BN(z̃)             if batchnorm
//! out = act(u)
//! ```
//!
//! `input` noise in front of a BN layer is the dropout-b arrangement,
//! `pre-norm` noise is dropout-a.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bn_lab::{batch_stats, BatchNormState};
use crate::error::{check_dim, invalid, Error, Result};
use crate::mc::{derive_seed, stream_rng};
use crate::regularizers::{BatchRealization, Mode, NoiseOp, NoiseOpSpec};
use crate::stats::Moments;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    #[default]
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSite {
    #[default]
    Input,
    PreNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub width: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub noise: Option<NoiseOpSpec>,
    #[serde(default)]
    pub noise_site: NoiseSite,
    #[serde(default)]
    pub batchnorm: bool,
}

impl LayerSpec {
    pub fn dense(width: usize, activation: Activation) -> Self {
        Self {
            width,
            activation,
            noise: None,
            noise_site: NoiseSite::Input,
            batchnorm: false,
        }
    }

    pub fn with_noise(mut self, noise: NoiseOpSpec, site: NoiseSite) -> Self {
        self.noise = Some(noise);
        self.noise_site = site;
        self
    }

    pub fn with_batchnorm(mut self) -> Self {
        self.batchnorm = true;
        self
    }
}

struct Layer {
    spec: LayerSpec,
    w: DMatrix<f64>,
    b: DVector<f64>,
    bn: Option<BatchNormState>,
    noise: Option<Box<dyn NoiseOp>>,
}

impl Clone for Layer {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec,
            w: self.w.clone(),
            b: self.b.clone(),
            bn: self.bn.clone(),
            noise: self.spec.noise.map(|n| n.build().expect("validated at construction")),
        }
    }
}

struct BnCache {
    xhat: DMatrix<f64>,
    inv_std: Vec<f64>,
}

struct LayerCache {
    input: DMatrix<f64>,
    noise_in: Option<BatchRealization>,
    noise_pre: Option<BatchRealization>,
    bn: Option<BnCache>,
    pre_act: DMatrix<f64>,
}

/// Everything a backward pass needs, tied to the parameter version it was
/// produced with.
pub struct ForwardCache {
    version: u64,
    mode: Mode,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    /// Same order as [`Mlp::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend(g.w.transpose().iter());
            out.extend(g.b.iter());
            if let (Some(gm), Some(bt)) = (&g.gamma, &g.beta) {
                out.extend(gm);
                out.extend(bt);
            }
        }
        out
    }
}

/// Multi-layer perceptron; the last layer produces the logits.
#[derive(Clone)]
pub struct Mlp {
    input_dim: usize,
    layers: Vec<Layer>,
    version: u64,
}

impl Mlp {
    /// Weights uniform in `±1/√fan_in`, biases zero, BN at identity.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        if input_dim == 0 || specs.is_empty() {
            return Err(invalid("layers", "need an input width and at least one layer"));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut fan_in = input_dim;
        for spec in specs {
            if spec.width == 0 {
                return Err(invalid("width", "layer widths must be positive"));
            }
            let noise = spec.noise.map(|n| n.build()).transpose()?;
            let bound = 1.0 / (fan_in as f64).sqrt();
            layers.push(Layer {
                spec: *spec,
                w: DMatrix::from_fn(spec.width, fan_in, |_, _| rng.random_range(-bound..bound)),
                b: DVector::zeros(spec.width),
                bn: spec.batchnorm.then(|| BatchNormState::new(spec.width)),
                noise,
            });
            fan_in = spec.width;
        }
        Ok(Self {
            input_dim,
            layers,
            version: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.width)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.w.transpose().iter());
            out.extend(l.b.iter());
            if let Some(bn) = &l.bn {
                out.extend(&bn.gamma);
                out.extend(&bn.beta);
            }
        }
        out
    }

    pub fn set_parameters(&mut self, theta: &[f64]) -> Result<()> {
        check_dim(self.parameters().len(), theta.len())?;
        let mut it = theta.iter().copied();
        for l in &mut self.layers {
            let (r, c) = l.w.shape();
            for i in 0..r {
                for j in 0..c {
                    l.w[(i, j)] = it.next().unwrap_or_default();
                }
            }
            l.b.iter_mut().for_each(|v| *v = it.next().unwrap_or_default());
            if let Some(bn) = &mut l.bn {
                bn.gamma.iter_mut().for_each(|v| *v = it.next().unwrap_or_default());
                bn.beta.iter_mut().for_each(|v| *v = it.next().unwrap_or_default());
            }
        }
        self.version += 1;
        Ok(())
    }

    fn needs_batch_stats(&self) -> bool {
        self.layers
            .iter()
            .any(|l| l.spec.batchnorm || l.spec.noise.is_some_and(|n| n.centered))
    }

    fn run(
        &mut self,
        x: &DMatrix<f64>,
        mode: Mode,
        mut noise: NoiseInput<'_, '_>,
    ) -> Result<(DMatrix<f64>, ForwardCache)> {
        check_dim(self.input_dim, x.ncols())?;
        if mode == Mode::Train && x.nrows() < 2 && self.needs_batch_stats() {
            return Err(Error::BatchTooSmall {
                what: "batch normalization or centered noise",
                needed: 2,
                got: x.nrows(),
            });
        }
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter_mut().enumerate() {
            let site = layer.spec.noise_site;
            let mut draw =
                |site_here: NoiseSite, v: DMatrix<f64>| -> Result<(DMatrix<f64>, Option<BatchRealization>)> {
                    match (&layer.noise, mode) {
                        (Some(op), Mode::Train) if site == site_here => match &mut noise {
                            NoiseInput::Sample(rng) => {
                                let (y, r) = op.train_batch(&v, *rng)?;
                                Ok((y, Some(r)))
                            }
                            NoiseInput::Replay(cache) => {
                                let r = match site_here {
                                    NoiseSite::Input => &cache.layers[k].noise_in,
                                    NoiseSite::PreNorm => &cache.layers[k].noise_pre,
                                };
                                let r = r
                                    .as_ref()
                                    .ok_or_else(|| invalid("cache", "no recorded noise for this layer"))?;
                                Ok((r.replay(&v)?, Some(r.clone())))
                            }
                        },
                        _ => Ok((v, None)),
                    }
                };
            let (input, noise_in) = draw(NoiseSite::Input, h)?;
            let mut z = &input * layer.w.transpose();
            for mut row in z.row_iter_mut() {
                row += layer.b.transpose();
            }
            let (z, noise_pre) = draw(NoiseSite::PreNorm, z)?;
            let (u, bn) = match &mut layer.bn {
                None => (z, None),
                Some(state) => match mode {
                    Mode::Train => {
                        let (xhat, inv_std) = normalize_train(&z, state);
                        let u = affine(&xhat, state);
                        (u, Some(BnCache { xhat, inv_std }))
                    }
                    Mode::Eval => {
                        if !state.is_populated() {
                            return Err(Error::StatsNotPopulated);
                        }
                        let inv_std: Vec<f64> =
                            state.running_var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
                        let xhat = DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| {
                            (z[(i, j)] - state.running_mean[j]) * inv_std[j]
                        });
                        let u = affine(&xhat, state);
                        (u, Some(BnCache { xhat, inv_std }))
                    }
                },
            };
            h = match layer.spec.activation {
                Activation::Relu => u.map(|v| v.max(0.0)),
                Activation::None => u.clone(),
            };
            caches.push(LayerCache {
                input,
                noise_in,
                noise_pre,
                bn,
                pre_act: u,
            });
        }
        Ok((
            h,
            ForwardCache {
                version: self.version,
                mode,
                layers: caches,
            },
        ))
    }

    /// Forward pass; train mode samples fresh noise per row and updates BN
    /// running statistics.
    pub fn forward(
        &mut self,
        x: &DMatrix<f64>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(DMatrix<f64>, ForwardCache)> {
        self.run(x, mode, NoiseInput::Sample(rng))
    }

    /// Train-mode forward that reuses the noise recorded in `cache`.
    pub fn forward_replay(&mut self, x: &DMatrix<f64>, cache: &ForwardCache) -> Result<DMatrix<f64>> {
        check_dim(cache.layers.first().map_or(0, |l| l.input.nrows()), x.nrows())?;
        self.run(x, cache.mode, NoiseInput::Replay(cache)).map(|(y, _)| y)
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut copy = self.clone();
        let mut unused = stream_rng(0, 0);
        copy.forward(x, Mode::Eval, &mut unused).map(|(y, _)| y)
    }

    /// Exact gradients of a loss whose gradient with respect to the logits
    /// is `dout`, with the noise recorded in `cache` held fixed.
    pub fn backward(&self, cache: &ForwardCache, dout: &DMatrix<f64>) -> Result<Gradients> {
        if cache.version != self.version {
            return Err(Error::StaleCache {
                cached: cache.version,
                current: self.version,
            });
        }
        check_dim(self.layers.len(), cache.layers.len())?;
        let mut grad = dout.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            check_dim(lc.pre_act.ncols(), grad.ncols())?;
            if layer.spec.activation == Activation::Relu {
                grad.zip_apply(&lc.pre_act, |g, u| {
                    if u <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            let (mut dz, gamma, beta) = match (&layer.bn, &lc.bn) {
                (Some(state), Some(bc)) => {
                    let (dz, dg, db) = bn_backward(&grad, bc, state, cache.mode);
                    (dz, Some(dg), Some(db))
                }
                _ => (grad, None, None),
            };
            if let Some(r) = &lc.noise_pre {
                dz = r.backward(&dz)?;
            }
            let dw = dz.transpose() * &lc.input;
            let db = DVector::from_iterator(dz.ncols(), dz.column_iter().map(|c| c.sum()));
            let mut dh = &dz * &layer.w;
            if let Some(r) = &lc.noise_in {
                dh = r.backward(&dh)?;
            }
            out.push(LayerGrad {
                w: dw,
                b: db,
                gamma,
                beta,
            });
            grad = dh;
        }
        out.reverse();
        Ok(Gradients { layers: out })
    }
}

enum NoiseInput<'a, 'r> {
    Sample(&'a mut (dyn RngCore + 'r)),
    Replay(&'a ForwardCache),
}

fn normalize_train(z: &DMatrix<f64>, state: &mut BatchNormState) -> (DMatrix<f64>, Vec<f64>) {
    let (b, d) = z.shape();
    let (mu, var) = batch_stats(z);
    let m = state.momentum;
    let unbias = b as f64 / (b as f64 - 1.0);
    let mut running_mean = state.running_mean.clone();
    let mut running_var = state.running_var.clone();
    for j in 0..d {
        running_mean[j] = (1.0 - m) * running_mean[j] + m * mu[j];
        running_var[j] = (1.0 - m) * running_var[j] + m * unbias * var[j];
    }
    state
        .set_running(running_mean, running_var)
        .expect("running statistics keep their width");
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let xhat = DMatrix::from_fn(b, d, |i, j| (z[(i, j)] - mu[j]) * inv_std[j]);
    (xhat, inv_std)
}

fn affine(xhat: &DMatrix<f64>, state: &BatchNormState) -> DMatrix<f64> {
    DMatrix::from_fn(xhat.nrows(), xhat.ncols(), |i, j| {
        state.gamma[j] * xhat[(i, j)] + state.beta[j]
    })
}

fn bn_backward(
    du: &DMatrix<f64>,
    c: &BnCache,
    state: &BatchNormState,
    mode: Mode,
) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let (b, d) = du.shape();
    let mut dz = DMatrix::zeros(b, d);
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for j in 0..d {
        let (mut s, mut sx) = (0.0, 0.0);
        for i in 0..b {
            let dx = du[(i, j)] * state.gamma[j];
            dgamma[j] += du[(i, j)] * c.xhat[(i, j)];
            dbeta[j] += du[(i, j)];
            s += dx;
            sx += dx * c.xhat[(i, j)];
        }
        for i in 0..b {
            let dx = du[(i, j)] * state.gamma[j];
            dz[(i, j)] = match mode {
                Mode::Train => c.inv_std[j] * (dx - s / b as f64 - c.xhat[(i, j)] * sx / b as f64),
                Mode::Eval => c.inv_std[j] * dx,
            };
        }
    }
    (dz, dgamma, dbeta)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, DMatrix<f64>)> {
    let (n, k) = logits.shape();
    check_dim(n, labels.len())?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(invalid("labels", format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = DMatrix::zeros(n, k);
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.max();
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        loss += log_z - logits[(i, labels[i])];
        for j in 0..k {
            grad[(i, j)] = ((logits[(i, j)] - log_z).exp() - f64::from(u8::from(j == labels[i]))) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

pub fn accuracy(logits: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let hits = logits
        .row_iter()
        .zip(labels)
        .filter(|(row, &y)| row.iter().enumerate().all(|(j, &v)| j == y || v < row[y]))
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// SGD with momentum; weight decay applies to the weight matrices only.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut Mlp, grads: &Gradients) -> Result<()> {
        let mut theta = model.parameters();
        let mut g = grads.flatten();
        check_dim(theta.len(), g.len())?;
        let mut offset = 0;
        for l in &model.layers {
            let n = l.w.len();
            for k in offset..offset + n {
                g[k] += self.weight_decay * theta[k];
            }
            offset += n + l.b.len() + l.bn.as_ref().map_or(0, |bn| 2 * bn.dim());
        }
        if self.velocity.len() != theta.len() {
            self.velocity = vec![0.0; theta.len()];
        }
        for ((t, v), gk) in theta.iter_mut().zip(&mut self.velocity).zip(&g) {
            *v = self.momentum * *v + gk;
            *t -= self.lr * *v;
        }
        model.set_parameters(&theta)
    }
}

/// Labelled rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Vec<usize>) -> Result<Self> {
        check_dim(x.nrows(), y.len())?;
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.y.iter().max().map_or(0, |m| m + 1)
    }

    fn rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

/// Two Gaussian classes `N(±(s/2)·e₁, I)` with a fraction of labels flipped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub dim: usize,
    pub separation: f64,
    pub flip_rate: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_val: 1000,
            dim: 5,
            separation: 2.0,
            flip_rate: 0.1,
        }
    }
}

impl MixtureSpec {
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Dataset {
        let mut y = Vec::with_capacity(n);
        let mut x = DMatrix::zeros(n, self.dim);
        for i in 0..n {
            let class = rng.random_range(0..2usize);
            for j in 0..self.dim {
                x[(i, j)] = rng.sample::<f64, _>(StandardNormal);
            }
            x[(i, 0)] += if class == 1 { 0.5 } else { -0.5 } * self.separation;
            let flip = rng.random::<f64>() < self.flip_rate;
            y.push(if flip { 1 - class } else { class });
        }
        Dataset { x, y }
    }

    /// Train and validation sets for `seed`.
    pub fn split(&self, seed: u64) -> (Dataset, Dataset) {
        let mut rng = stream_rng(derive_seed(seed, 0xDA7A), 0);
        (self.sample(self.n_train, &mut rng), self.sample(self.n_val, &mut rng))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 20,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub seed: u64,
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Trains `model` and records eval-mode accuracies after every epoch.
/// Shuffling and noise draw from separate streams of `seed`.
pub fn train(model: &mut Mlp, data: &Dataset, val: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<Vec<EpochRecord>> {
    if cfg.batch_size < 2 && model.needs_batch_stats() {
        return Err(invalid(
            "batch_size",
            "batchnorm or centered noise needs batches of at least 2",
        ));
    }
    if cfg.batch_size == 0 || data.is_empty() {
        return Err(invalid("batch_size", "need a positive batch size and data"));
    }
    let mut order_rng = stream_rng(derive_seed(seed, 1), 0);
    let mut noise_rng = stream_rng(derive_seed(seed, 2), 0);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        idx.shuffle(&mut order_rng);
        for chunk in idx.chunks(cfg.batch_size) {
            if chunk.len() < 2 && model.needs_batch_stats() {
                continue;
            }
            let batch = data.rows(chunk);
            let (logits, cache) = model.forward(&batch.x, Mode::Train, &mut noise_rng)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &batch.y)?;
            if !loss.is_finite() {
                return Err(invalid("loss", "training diverged"));
            }
            let grads = model.backward(&cache, &dlogits)?;
            opt.step(model, &grads)?;
        }
        records.push(EpochRecord {
            seed,
            epoch,
            train_acc: accuracy(&model.predict(&data.x)?, &data.y),
            val_acc: accuracy(&model.predict(&val.x)?, &val.y),
        });
    }
    Ok(records)
}

/// One arm of a comparison: noise applied to the input of every layer
/// after the first (and of the first too with `include_input`), or none
/// for the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regularizer {
    pub label: String,
    #[serde(default)]
    pub noise: Option<NoiseOpSpec>,
    #[serde(default)]
    pub include_input: bool,
}

impl Regularizer {
    pub fn baseline() -> Self {
        Self {
            label: "none".into(),
            noise: None,
            include_input: false,
        }
    }

    pub fn strength(&self) -> f64 {
        self.noise.map_or(1.0, |n| n.equivalent_keep_rate())
    }

    fn apply(&self, specs: &[LayerSpec]) -> Vec<LayerSpec> {
        specs
            .iter()
            .enumerate()
            .map(|(k, s)| match self.noise {
                Some(n) if k > 0 || self.include_input => s.with_noise(n, NoiseSite::Input),
                _ => *s,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub regularizer: String,
    pub strength: f64,
    pub seed: u64,
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub regularizer: String,
    pub strength: f64,
    pub seeds: usize,
    pub train_acc_mean: f64,
    pub train_acc_sd: f64,
    pub val_acc_mean: f64,
    pub val_acc_sd: f64,
    pub best_val_acc_mean: f64,
    pub gap_mean: f64,
    pub gap_sd: f64,
    /// Final-epoch gap per seed, in seed order.
    pub gaps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub runs: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let m: Moments = xs.iter().copied().collect();
    let sd = if m.count() > 1 { m.variance().sqrt() } else { 0.0 };
    (m.mean(), sd)
}

/// Trains every regularizer on every seed. A seed fixes the data split,
/// the initial weights, and the batch order, so arms are paired by seed.
pub fn train_and_report(
    input_dim: usize,
    specs: &[LayerSpec],
    cfg: &TrainConfig,
    data: &dyn Fn(u64) -> Result<(Dataset, Dataset)>,
    regularizers: &[Regularizer],
    seeds: &[u64],
) -> Result<Report> {
    let mut runs = Vec::new();
    let mut summary = Vec::new();
    for reg in regularizers {
        let mut finals = Vec::new();
        for &seed in seeds {
            let (train_set, val_set) = data(seed)?;
            let mut init = stream_rng(derive_seed(seed, 3), 0);
            let mut model = Mlp::new(input_dim, &reg.apply(specs), &mut init)?;
            let records = train(&mut model, &train_set, &val_set, cfg, seed)?;
            let best = records.iter().map(|r| r.val_acc).fold(0.0, f64::max);
            if let Some(last) = records.last() {
                finals.push((last.train_acc, last.val_acc, best));
            }
            runs.extend(records.into_iter().map(|r| RunRecord {
                regularizer: reg.label.clone(),
                strength: reg.strength(),
                seed: r.seed,
                epoch: r.epoch,
                train_acc: r.train_acc,
                val_acc: r.val_acc,
            }));
        }
        let tr: Vec<f64> = finals.iter().map(|f| f.0).collect();
        let va: Vec<f64> = finals.iter().map(|f| f.1).collect();
        let best: Vec<f64> = finals.iter().map(|f| f.2).collect();
        let gaps: Vec<f64> = finals.iter().map(|f| f.0 - f.1).collect();
        let ((tm, ts), (vm, vs), (gm, gs)) = (mean_sd(&tr), mean_sd(&va), mean_sd(&gaps));
        summary.push(SummaryRow {
            regularizer: reg.label.clone(),
            strength: reg.strength(),
            seeds: finals.len(),
            train_acc_mean: tm,
            train_acc_sd: ts,
            val_acc_mean: vm,
            val_acc_sd: vs,
            best_val_acc_mean: mean_sd(&best).0,
            gap_mean: gm,
            gap_sd: gs,
            gaps,
        });
    }
    Ok(Report { runs, summary })
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `n` fair coin flips.
pub fn sign_test_p_value(wins: usize, n: usize) -> f64 {
    let mut tail = 0.0;
    let mut c = 1.0f64;
    for k in 0..=n {
        if k >= wins {
            tail += c;
        }
        c = c * (n - k) as f64 / (k + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}
