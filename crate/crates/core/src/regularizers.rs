//! The noise-op family: rotation, Bernoulli / Gaussian dropout, Uout, and the
//! centering wrapper.
//!
//! Every op is zero-centered in train mode (`E[x̃ | x] = x`) and the identity
//! in eval mode. Train-mode noise is drawn as a per-row [`NoiseRealization`]
//! that can also be applied transposed, which is what backprop needs.

use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::rotation::{
    apply_featuremap, fixed_direction_sequence, rotate_in_place, rotate_transpose_in_place, AngleDistribution,
    BlockAnchor, BlockSpec, FeatureMap, RotationRealization, RotationSampler,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Eval,
}

/// One row's worth of sampled noise.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseRealization {
    /// `x̃_i = m_i · x_i`.
    Multipliers(Vec<f64>),
    Rotation(RotationRealization),
}

impl NoiseRealization {
    pub fn apply_in_place(&self, x: &mut [f64]) {
        match self {
            Self::Multipliers(m) => x.iter_mut().zip(m).for_each(|(v, k)| *v *= k),
            Self::Rotation(r) => rotate_in_place(r.pairing(), r.tangent(), x),
        }
    }

    pub fn apply_transpose_in_place(&self, g: &mut [f64]) {
        match self {
            Self::Multipliers(m) => g.iter_mut().zip(m).for_each(|(v, k)| *v *= k),
            Self::Rotation(r) => rotate_transpose_in_place(r.pairing(), r.tangent(), g),
        }
    }
}

/// Everything sampled for one batch: per-row realizations and, when centered,
/// the batch means the rows were centered by.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRealization {
    pub rows: Vec<NoiseRealization>,
    pub center: Option<Vec<f64>>,
}

impl BatchRealization {
    /// Applies the recorded noise to `batch`. Centered realizations are
    /// re-centered on the batch's own mean.
    pub fn replay(&self, batch: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (n, d) = batch.shape();
        check_dim(self.rows.len(), n)?;
        let means = self.center.as_ref().map(|_| column_means(batch));
        let mut out = batch.clone();
        let mut row = vec![0.0; d];
        for (i, r) in self.rows.iter().enumerate() {
            for j in 0..d {
                row[j] = batch[(i, j)] - means.as_ref().map_or(0.0, |m| m[j]);
            }
            r.apply_in_place(&mut row);
            for j in 0..d {
                out[(i, j)] = row[j] + means.as_ref().map_or(0.0, |m| m[j]);
            }
        }
        Ok(out)
    }

    /// Gradient with respect to the input batch given the gradient with
    /// respect to the output. Includes the path through the batch mean when
    /// centered.
    pub fn backward(&self, grad: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (n, d) = grad.shape();
        check_dim(self.rows.len(), n)?;
        let mut out = grad.clone();
        let mut row = vec![0.0; d];
        let mut leak = vec![0.0; d];
        for (i, r) in self.rows.iter().enumerate() {
            for j in 0..d {
                row[j] = grad[(i, j)];
            }
            r.apply_transpose_in_place(&mut row);
            for j in 0..d {
                leak[j] += grad[(i, j)] - row[j];
                out[(i, j)] = row[j];
            }
        }
        if self.center.is_some() {
            for i in 0..n {
                for j in 0..d {
                    out[(i, j)] += leak[j] / n as f64;
                }
            }
        }
        Ok(out)
    }
}

fn column_means(batch: &DMatrix<f64>) -> Vec<f64> {
    let n = batch.nrows() as f64;
    batch.column_iter().map(|c| c.sum() / n).collect()
}

/// A train-mode stochastic map with an identity eval mode.
pub trait NoiseOp: Send + Sync {
    /// Draws the noise for one `dim`-vector.
    fn realize(&self, dim: usize, rng: &mut dyn RngCore) -> Result<NoiseRealization>;

    /// Bernoulli keep rate with the same multiplier variance.
    fn equivalent_keep_rate(&self) -> f64;

    /// Whether rows are centered by the batch mean before noising.
    fn is_centered(&self) -> bool {
        false
    }

    /// Train-mode noise on a single (uncentered) vector.
    fn train(&self, x: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let mut y = x.to_vec();
        self.realize(x.len(), rng)?.apply_in_place(&mut y);
        Ok(y)
    }

    /// Train-mode noise on an N × D batch, returning what was sampled.
    fn train_batch(&self, batch: &DMatrix<f64>, rng: &mut dyn RngCore) -> Result<(DMatrix<f64>, BatchRealization)> {
        noise_batch(self, batch, self.is_centered(), rng)
    }

    fn forward(&self, batch: &DMatrix<f64>, mode: Mode, rng: &mut dyn RngCore) -> Result<DMatrix<f64>> {
        match mode {
            Mode::Eval => Ok(batch.clone()),
            Mode::Train => self.train_batch(batch, rng).map(|(y, _)| y),
        }
    }
}

fn noise_batch<O: NoiseOp + ?Sized>(
    op: &O,
    batch: &DMatrix<f64>,
    center: bool,
    rng: &mut dyn RngCore,
) -> Result<(DMatrix<f64>, BatchRealization)> {
    let (n, d) = batch.shape();
    let means = if center {
        if n < 2 {
            return Err(Error::BatchTooSmall {
                what: "centered noise",
                needed: 2,
                got: n,
            });
        }
        Some(column_means(batch))
    } else {
        None
    };
    let mut out = batch.clone();
    let mut rows = Vec::with_capacity(n);
    let mut row = vec![0.0; d];
    for i in 0..n {
        let r = op.realize(d, rng)?;
        for j in 0..d {
            row[j] = batch[(i, j)] - means.as_ref().map_or(0.0, |m| m[j]);
        }
        r.apply_in_place(&mut row);
        for j in 0..d {
            out[(i, j)] = row[j] + means.as_ref().map_or(0.0, |m| m[j]);
        }
        rows.push(r);
    }
    Ok((out, BatchRealization { rows, center: means }))
}

/// Inverted Bernoulli dropout: keep with probability `p`, scale survivors by `1/p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BernoulliDropout {
    keep_rate: f64,
}

impl BernoulliDropout {
    pub fn new(keep_rate: f64) -> Result<Self> {
        if !(keep_rate > 0.0 && keep_rate <= 1.0) {
            return Err(invalid("keep_rate", format!("{keep_rate} not in (0, 1]")));
        }
        Ok(Self { keep_rate })
    }
}

impl NoiseOp for BernoulliDropout {
    fn realize(&self, dim: usize, rng: &mut dyn RngCore) -> Result<NoiseRealization> {
        let p = self.keep_rate;
        let scale = 1.0 / p;
        let m = (0..dim)
            .map(|_| if rng.random::<f64>() < p { scale } else { 0.0 })
            .collect();
        Ok(NoiseRealization::Multipliers(m))
    }

    fn equivalent_keep_rate(&self) -> f64 {
        self.keep_rate
    }
}

/// `x̃_i = x_i (1 + ε_i)`, `ε_i ~ N(0, σ²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianDropout {
    variance: f64,
}

impl GaussianDropout {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(invalid("variance", format!("{variance} must be non-negative")));
        }
        Ok(Self { variance })
    }
}

impl NoiseOp for GaussianDropout {
    fn realize(&self, dim: usize, rng: &mut dyn RngCore) -> Result<NoiseRealization> {
        let sd = self.variance.sqrt();
        let m = (0..dim)
            .map(|_| 1.0 + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(NoiseRealization::Multipliers(m))
    }

    fn equivalent_keep_rate(&self) -> f64 {
        1.0 / (1.0 + self.variance)
    }
}

/// `x̃_i = x_i (1 + r_i)`, `r_i ~ Unif[-β, β]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Uout {
    beta: f64,
}

impl Uout {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(invalid("beta", format!("{beta} must be non-negative")));
        }
        Ok(Self { beta })
    }
}

impl NoiseOp for Uout {
    fn realize(&self, dim: usize, rng: &mut dyn RngCore) -> Result<NoiseRealization> {
        let b = self.beta;
        let m = (0..dim)
            .map(|_| if b == 0.0 { 1.0 } else { 1.0 + rng.random_range(-b..=b) })
            .collect();
        Ok(NoiseRealization::Multipliers(m))
    }

    fn equivalent_keep_rate(&self) -> f64 {
        1.0 / (1.0 + self.beta * self.beta / 3.0)
    }
}

/// Dense rotation noise: fresh pairing and angle per row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationOut {
    sampler: RotationSampler,
}

impl RotationOut {
    pub fn new(angle: AngleDistribution) -> Result<Self> {
        angle.validate()?;
        Ok(Self {
            sampler: RotationSampler::new(angle),
        })
    }

    pub fn sampler(&self) -> &RotationSampler {
        &self.sampler
    }
}

impl NoiseOp for RotationOut {
    fn realize(&self, dim: usize, rng: &mut dyn RngCore) -> Result<NoiseRealization> {
        self.sampler.sample(dim, rng).map(NoiseRealization::Rotation)
    }

    fn equivalent_keep_rate(&self) -> f64 {
        self.sampler.angle.keep_rate()
    }
}

/// Noises `x - mean` and adds the batch mean back.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Centered<O>(pub O);

impl<O: NoiseOp> NoiseOp for Centered<O> {
    fn realize(&self, dim: usize, rng: &mut dyn RngCore) -> Result<NoiseRealization> {
        self.0.realize(dim, rng)
    }

    fn equivalent_keep_rate(&self) -> f64 {
        self.0.equivalent_keep_rate()
    }

    fn is_centered(&self) -> bool {
        true
    }
}

impl NoiseOp for Box<dyn NoiseOp> {
    fn realize(&self, dim: usize, rng: &mut dyn RngCore) -> Result<NoiseRealization> {
        (**self).realize(dim, rng)
    }

    fn equivalent_keep_rate(&self) -> f64 {
        (**self).equivalent_keep_rate()
    }

    fn is_centered(&self) -> bool {
        (**self).is_centered()
    }
}

pub fn bernoulli_dropout(x: &[f64], keep_rate: f64, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
    BernoulliDropout::new(keep_rate)?.train(x, rng)
}

pub fn gaussian_dropout(x: &[f64], variance: f64, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
    GaussianDropout::new(variance)?.train(x, rng)
}

pub fn uout(x: &[f64], beta: f64, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
    Uout::new(beta)?.train(x, rng)
}

/// Applies `op` to `batch - mean` and adds the per-feature batch mean back.
pub fn centered(op: &dyn NoiseOp, batch: &DMatrix<f64>, rng: &mut dyn RngCore) -> Result<DMatrix<f64>> {
    noise_batch(op, batch, true, rng).map(|(y, _)| y)
}

/// The op and its strength, as read from configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseKind {
    Rotation {
        angle: AngleDistribution,
    },
    /// Feature-map rotation confined to a contiguous block.
    RotationBlock {
        angle: AngleDistribution,
        block_height: usize,
        block_width: usize,
    },
    BernoulliDropout {
        keep_rate: f64,
    },
    GaussianDropout {
        variance: f64,
    },
    Uout {
        beta: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    #[default]
    Dense,
    Featuremap,
    Sequence,
}

/// Constructible description of a noise op.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseOpSpec {
    pub op: NoiseKind,
    #[serde(default)]
    pub centered: bool,
    #[serde(default)]
    pub placement: Placement,
}

impl NoiseOpSpec {
    pub fn dense(op: NoiseKind) -> Self {
        Self {
            op,
            centered: false,
            placement: Placement::Dense,
        }
    }

    pub fn centered(mut self, on: bool) -> Self {
        self.centered = on;
        self
    }

    /// Short label for reports, e.g. `rotation-centered`.
    pub fn label(&self) -> String {
        let base = match self.op {
            NoiseKind::Rotation { .. } => "rotation",
            NoiseKind::RotationBlock { .. } => "rotation-block",
            NoiseKind::BernoulliDropout { .. } => "bernoulli-dropout",
            NoiseKind::GaussianDropout { .. } => "gaussian-dropout",
            NoiseKind::Uout { .. } => "uout",
        };
        if self.centered {
            format!("{base}-centered")
        } else {
            base.to_string()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.op {
            NoiseKind::Rotation { angle } => angle.validate(),
            NoiseKind::RotationBlock {
                angle,
                block_height,
                block_width,
            } => {
                if block_height == 0 || block_width == 0 {
                    return Err(invalid("block", "block extent must be positive"));
                }
                if self.placement != Placement::Featuremap {
                    return Err(invalid("placement", "rotation-block needs featuremap placement"));
                }
                angle.validate()
            }
            NoiseKind::BernoulliDropout { keep_rate } => BernoulliDropout::new(keep_rate).map(|_| ()),
            NoiseKind::GaussianDropout { variance } => GaussianDropout::new(variance).map(|_| ()),
            NoiseKind::Uout { beta } => Uout::new(beta).map(|_| ()),
        }
    }

    pub fn equivalent_keep_rate(&self) -> f64 {
        match self.op {
            NoiseKind::Rotation { angle } | NoiseKind::RotationBlock { angle, .. } => angle.keep_rate(),
            NoiseKind::BernoulliDropout { keep_rate } => keep_rate,
            NoiseKind::GaussianDropout { variance } => 1.0 / (1.0 + variance),
            NoiseKind::Uout { beta } => 1.0 / (1.0 + beta * beta / 3.0),
        }
    }

    /// The dense op. Block rotation has no dense form.
    pub fn build(&self) -> Result<Box<dyn NoiseOp>> {
        self.validate()?;
        let op: Box<dyn NoiseOp> = match self.op {
            NoiseKind::Rotation { angle } => wrap(RotationOut::new(angle)?, self.centered),
            NoiseKind::RotationBlock { .. } => {
                return Err(invalid("op", "rotation-block applies to feature maps only"));
            }
            NoiseKind::BernoulliDropout { keep_rate } => wrap(BernoulliDropout::new(keep_rate)?, self.centered),
            NoiseKind::GaussianDropout { variance } => wrap(GaussianDropout::new(variance)?, self.centered),
            NoiseKind::Uout { beta } => wrap(Uout::new(beta)?, self.centered),
        };
        Ok(op)
    }

    /// Feature-map noise for the rotation kinds (always centered).
    pub fn apply_featuremap(&self, maps: &[FeatureMap], rng: &mut dyn RngCore) -> Result<Vec<FeatureMap>> {
        self.validate()?;
        match self.op {
            NoiseKind::Rotation { angle } => apply_featuremap(maps, &RotationSampler::new(angle), None, rng),
            NoiseKind::RotationBlock {
                angle,
                block_height,
                block_width,
            } => {
                let block = BlockSpec {
                    height: block_height,
                    width: block_width,
                    anchor: BlockAnchor::Uniform,
                };
                apply_featuremap(maps, &RotationSampler::new(angle), Some(block), rng)
            }
            _ => Err(invalid("op", "only rotation kinds apply to feature maps")),
        }
    }

    /// Sequence noise for the rotation kind: one pairing per sequence.
    pub fn apply_sequence(&self, xs: &[Vec<f64>], rng: &mut dyn RngCore) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        match self.op {
            NoiseKind::Rotation { angle } => fixed_direction_sequence(xs, &RotationSampler::new(angle), rng),
            _ => Err(invalid("op", "only rotation applies to sequences")),
        }
    }
}

fn wrap<O: NoiseOp + 'static>(op: O, centered: bool) -> Box<dyn NoiseOp> {
    if centered {
        Box::new(Centered(op))
    } else {
        Box::new(op)
    }
}

/// Checks a batch against a dimension.
pub fn check_width(batch: &DMatrix<f64>, dim: usize) -> Result<()> {
    check_dim(dim, batch.ncols())
}
