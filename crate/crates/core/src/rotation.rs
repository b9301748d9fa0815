//! Random pair rotations applied in O(D).
//!
//! A realization pairs the D coordinates as `(P_l, P_{l+d})` for a uniform
//! permutation `P` and rotates every pair by the same angle θ, scaled by
//! `1/cos θ`. For a pair `(u, v)` the output is `(u + v·tanθ, v - u·tanθ)`,
//! so only `tan θ` is ever needed and nothing is materialized as a matrix.
//!
//! For odd D one coordinate, chosen uniformly, is left untouched.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};

/// A partition of `0..dim` into ordered pairs plus, for odd `dim`, one fixed
/// coordinate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pairing {
    pairs: Vec<(usize, usize)>,
    fixed: Option<usize>,
    dim: usize,
}

impl Pairing {
    /// Validates that `pairs` and `fixed` cover `0..dim` exactly once.
    pub fn new(dim: usize, pairs: Vec<(usize, usize)>, fixed: Option<usize>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::DimensionTooSmall { dim });
        }
        if fixed.is_some() != (dim % 2 == 1) {
            return Err(invalid("fixed", "a fixed coordinate is required iff dim is odd"));
        }
        let mut seen = vec![false; dim];
        let coords = pairs.iter().flat_map(|&(a, b)| [a, b]).chain(fixed);
        for c in coords {
            if c >= dim || std::mem::replace(&mut seen[c], true) {
                return Err(invalid("pairs", format!("coordinate {c} out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(invalid("pairs", "pairing does not cover every coordinate"));
        }
        Ok(Self { pairs, fixed, dim })
    }

    /// Pairs `(perm[l], perm[l + d])` for `l < d = dim / 2`; for odd `dim` the
    /// last entry of `perm` is the fixed coordinate. `perm` is 0-indexed.
    pub fn from_permutation(perm: &[usize]) -> Result<Self> {
        let dim = perm.len();
        if dim < 2 {
            return Err(Error::DimensionTooSmall { dim });
        }
        let d = dim / 2;
        let pairs = (0..d).map(|l| (perm[l], perm[l + d])).collect();
        let fixed = (dim % 2 == 1).then(|| perm[2 * d]);
        Self::new(dim, pairs, fixed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn fixed(&self) -> Option<usize> {
        self.fixed
    }
}

/// Draws a pairing induced by a uniformly random permutation of `0..dim`.
pub fn sample_pairing<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Pairing> {
    if dim < 2 {
        return Err(Error::DimensionTooSmall { dim });
    }
    let mut perm: Vec<usize> = (0..dim).collect();
    perm.shuffle(rng);
    Pairing::from_permutation(&perm)
}

/// Distribution of the rotation angle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AngleDistribution {
    /// θ ~ Unif(-Θ, Θ), Θ in (0, π/2).
    UniformAngle { max_angle: f64 },
    /// tan θ ~ N(0, σ²), σ > 0.
    GaussianTangent { sigma: f64 },
    /// θ fixed, in (-π/2, π/2).
    Fixed { angle: f64 },
}

impl AngleDistribution {
    pub fn uniform_angle(max_angle: f64) -> Result<Self> {
        let d = Self::UniformAngle { max_angle };
        d.validate()?;
        Ok(d)
    }

    pub fn gaussian_tangent(sigma: f64) -> Result<Self> {
        let d = Self::GaussianTangent { sigma };
        d.validate()?;
        Ok(d)
    }

    pub fn fixed(angle: f64) -> Result<Self> {
        let d = Self::Fixed { angle };
        d.validate()?;
        Ok(d)
    }

    /// Gaussian-tangent distribution whose `E tan²θ` equals `(1 - p) / p`.
    pub fn gaussian_for_keep_rate(p: f64) -> Result<Self> {
        check_open_keep_rate(p)?;
        Self::gaussian_tangent(((1.0 - p) / p).sqrt())
    }

    /// Uniform-angle distribution whose `E tan²θ` equals `(1 - p) / p`,
    /// found by bisection of `tan Θ / Θ - 1` on (0, π/2).
    pub fn uniform_for_keep_rate(p: f64) -> Result<Self> {
        check_open_keep_rate(p)?;
        let target = (1.0 - p) / p;
        let (mut lo, mut hi) = (0.0_f64, std::f64::consts::FRAC_PI_2);
        while hi - lo > 1e-12 {
            let mid = 0.5 * (lo + hi);
            if uniform_angle_second_moment(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Self::uniform_angle(0.5 * (lo + hi))
    }

    pub fn validate(&self) -> Result<()> {
        use std::f64::consts::FRAC_PI_2;
        match *self {
            Self::UniformAngle { max_angle } if !(max_angle > 0.0 && max_angle < FRAC_PI_2) => {
                Err(invalid("max_angle", format!("{max_angle} not in (0, π/2)")))
            }
            Self::GaussianTangent { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(invalid("sigma", format!("{sigma} must be positive")))
            }
            Self::Fixed { angle } if !(angle.abs() < FRAC_PI_2) => {
                Err(invalid("angle", format!("{angle} not in (-π/2, π/2)")))
            }
            _ => Ok(()),
        }
    }

    /// `E tan²θ`.
    pub fn second_moment_of_tangent(&self) -> f64 {
        match *self {
            Self::UniformAngle { max_angle } => uniform_angle_second_moment(max_angle),
            Self::GaussianTangent { sigma } => sigma * sigma,
            Self::Fixed { angle } => angle.tan().powi(2),
        }
    }

    /// Bernoulli keep rate with the same multiplier variance.
    pub fn keep_rate(&self) -> f64 {
        keep_rate_from_second_moment(self.second_moment_of_tangent())
    }

    /// A representative angle magnitude: Θ, |θ|, or atan σ.
    pub fn angle_scale(&self) -> f64 {
        match *self {
            Self::UniformAngle { max_angle } => max_angle,
            Self::GaussianTangent { sigma } => sigma.atan(),
            Self::Fixed { angle } => angle.abs(),
        }
    }

    /// Draws `tan θ` from the symmetric distribution.
    pub fn sample_tangent<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::UniformAngle { max_angle } => rng.random_range(-max_angle..max_angle).tan(),
            Self::GaussianTangent { sigma } => sigma * rng.sample::<f64, _>(StandardNormal),
            Self::Fixed { angle } => angle.tan(),
        }
    }

    /// Draws `tan θ` with θ restricted to `[0, Θ)`; the feature-map form.
    pub fn sample_one_sided_tangent<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::UniformAngle { max_angle } => rng.random_range(0.0..max_angle).tan(),
            Self::GaussianTangent { sigma } => (sigma * rng.sample::<f64, _>(StandardNormal)).abs(),
            Self::Fixed { angle } => angle.tan(),
        }
    }
}

/// `E tan²θ` for θ ~ Unif(-Θ, Θ): `tan Θ / Θ - 1`.
fn uniform_angle_second_moment(max_angle: f64) -> f64 {
    if max_angle < 1e-4 {
        // series: Θ²/3 + 2Θ⁴/15
        let t2 = max_angle * max_angle;
        return t2 / 3.0 + 2.0 * t2 * t2 / 15.0;
    }
    max_angle.tan() / max_angle - 1.0
}

fn check_open_keep_rate(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(invalid("keep_rate", format!("{p} not in (0, 1)")))
    }
}

/// `p = 1 / (1 + E tan²θ)`.
pub fn keep_rate_from_second_moment(m: f64) -> f64 {
    1.0 / (1.0 + m)
}

/// Rotates `x` in place by `tan`, pair by pair.
pub fn rotate_in_place(pairing: &Pairing, tan: f64, x: &mut [f64]) {
    for &(a, b) in &pairing.pairs {
        let (u, v) = (x[a], x[b]);
        x[a] = u + v * tan;
        x[b] = v - u * tan;
    }
}

/// Rotates `x` in place by the transpose, which is the same pairing at `-tan`.
pub fn rotate_transpose_in_place(pairing: &Pairing, tan: f64, x: &mut [f64]) {
    rotate_in_place(pairing, -tan, x);
}

/// One sampled operator: a pairing and the tangent(s) it is rotated by.
/// Dense vectors carry one tangent; feature maps carry one per position.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationRealization {
    pairing: Pairing,
    tangents: Vec<f64>,
}

impl RotationRealization {
    pub fn new(pairing: Pairing, tangent: f64) -> Self {
        Self {
            pairing,
            tangents: vec![tangent],
        }
    }

    pub fn with_tangents(pairing: Pairing, tangents: Vec<f64>) -> Self {
        Self { pairing, tangents }
    }

    pub fn pairing(&self) -> &Pairing {
        &self.pairing
    }

    pub fn tangents(&self) -> &[f64] {
        &self.tangents
    }

    /// The (first) tangent.
    pub fn tangent(&self) -> f64 {
        self.tangents[0]
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.pairing.dim, x.len())?;
        let mut out = x.to_vec();
        rotate_in_place(&self.pairing, self.tangent(), &mut out);
        Ok(out)
    }

    pub fn apply_transpose(&self, g: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.pairing.dim, g.len())?;
        let mut out = g.to_vec();
        rotate_transpose_in_place(&self.pairing, self.tangent(), &mut out);
        Ok(out)
    }
}

/// `R x` with `R = M(P, θ) / cos θ`.
pub fn apply_rotation(x: &[f64], r: &RotationRealization) -> Result<Vec<f64>> {
    r.apply(x)
}

/// `Rᵀ g`.
pub fn apply_rotation_transpose(g: &[f64], r: &RotationRealization) -> Result<Vec<f64>> {
    r.apply_transpose(g)
}

/// Angle distribution plus the feature-map sign option.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationSampler {
    pub angle: AngleDistribution,
    /// Multiply all per-position feature-map angles by one shared random sign,
    /// making the otherwise one-sided map noise symmetric. Off by default.
    #[serde(default)]
    pub map_sign_flip: bool,
}

impl RotationSampler {
    pub fn new(angle: AngleDistribution) -> Self {
        Self {
            angle,
            map_sign_flip: false,
        }
    }

    pub fn with_map_sign_flip(mut self, on: bool) -> Self {
        self.map_sign_flip = on;
        self
    }

    /// Fresh pairing, then a fresh symmetric tangent.
    pub fn sample<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Result<RotationRealization> {
        let pairing = sample_pairing(dim, rng)?;
        let t = self.angle.sample_tangent(rng);
        Ok(RotationRealization::new(pairing, t))
    }
}

fn column_means(batch: &DMatrix<f64>) -> Vec<f64> {
    let n = batch.nrows() as f64;
    batch.column_iter().map(|c| c.sum() / n).collect()
}

/// `x̃ = R (x - E[x]) + E[x]` for every row of an N × D batch, with a fresh
/// realization per row and `E[x]` the per-feature batch mean.
pub fn apply_centered<R: Rng + ?Sized>(
    batch: &DMatrix<f64>,
    sampler: &RotationSampler,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let (n, d) = batch.shape();
    if n < 2 {
        return Err(Error::BatchTooSmall {
            what: "centered variant",
            needed: 2,
            got: n,
        });
    }
    let means = column_means(batch);
    let mut out = batch.clone();
    let mut row = vec![0.0; d];
    for i in 0..n {
        let r = sampler.sample(d, rng)?;
        for j in 0..d {
            row[j] = batch[(i, j)] - means[j];
        }
        rotate_in_place(r.pairing(), r.tangent(), &mut row);
        for j in 0..d {
            out[(i, j)] = row[j] + means[j];
        }
    }
    Ok(out)
}

/// A C × H × W feature map, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dim(channels * height * width, data.len())?;
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[(c * self.height + h) * self.width + w]
    }

    pub fn set(&mut self, c: usize, h: usize, w: usize, v: f64) {
        self.data[(c * self.height + h) * self.width + w] = v;
    }

    /// The channel vector at spatial position `(h, w)`.
    pub fn column(&self, h: usize, w: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, h, w)).collect()
    }
}

/// Where the rotated block sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockAnchor {
    /// Top-left corner uniform over valid positions, per map.
    Uniform,
    At {
        h: usize,
        w: usize,
    },
}

/// A contiguous spatial block; positions outside it pass through unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub height: usize,
    pub width: usize,
    pub anchor: BlockAnchor,
}

/// What was sampled for one feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct MapRealization {
    /// Shared pairing; `tangents` are per position, row-major over (H, W),
    /// zero outside the block.
    pub rotation: RotationRealization,
    /// Top-left corner and extent of the rotated region.
    pub region: (usize, usize, usize, usize),
}

/// Feature-map rotation: one pairing per map shared by all positions, a
/// one-sided angle per position, centering by the per-channel mean over
/// batch × H × W.
pub fn apply_featuremap<R: Rng + ?Sized>(
    maps: &[FeatureMap],
    sampler: &RotationSampler,
    block: Option<BlockSpec>,
    rng: &mut R,
) -> Result<Vec<FeatureMap>> {
    apply_featuremap_traced(maps, sampler, block, rng).map(|(out, _)| out)
}

/// [`apply_featuremap`] that also returns the sampled realizations.
pub fn apply_featuremap_traced<R: Rng + ?Sized>(
    maps: &[FeatureMap],
    sampler: &RotationSampler,
    block: Option<BlockSpec>,
    rng: &mut R,
) -> Result<(Vec<FeatureMap>, Vec<MapRealization>)> {
    let Some(first) = maps.first() else {
        return Ok((Vec::new(), Vec::new()));
    };
    let (c, h, w) = first.shape();
    if c < 2 {
        return Err(Error::DimensionTooSmall { dim: c });
    }
    for m in maps {
        check_dim(c * h * w, m.data.len())?;
        if m.shape() != (c, h, w) {
            return Err(invalid("maps", "all feature maps must share a shape"));
        }
    }
    if let Some(b) = block {
        if b.height == 0 || b.width == 0 || b.height > h || b.width > w {
            return Err(invalid(
                "block",
                format!("{}x{} block does not fit a {h}x{w} map", b.height, b.width),
            ));
        }
        if let BlockAnchor::At { h: h0, w: w0 } = b.anchor {
            if h0 + b.height > h || w0 + b.width > w {
                return Err(invalid("block", "anchored block extends past the map"));
            }
        }
    }

    let count = (maps.len() * h * w) as f64;
    let means: Vec<f64> = (0..c)
        .map(|ch| {
            maps.iter()
                .map(|m| m.data[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>())
                .sum::<f64>()
                / count
        })
        .collect();

    let mut outputs = Vec::with_capacity(maps.len());
    let mut traces = Vec::with_capacity(maps.len());
    let mut col = vec![0.0; c];
    for m in maps {
        let pairing = sample_pairing(c, rng)?;
        let sign = if sampler.map_sign_flip {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        } else {
            1.0
        };
        let region = match block {
            None => (0, 0, h, w),
            Some(b) => match b.anchor {
                BlockAnchor::At { h: h0, w: w0 } => (h0, w0, b.height, b.width),
                BlockAnchor::Uniform => (
                    rng.random_range(0..=h - b.height),
                    rng.random_range(0..=w - b.width),
                    b.height,
                    b.width,
                ),
            },
        };
        let (h0, w0, bh, bw) = region;
        let mut tangents = vec![0.0; h * w];
        let mut out = m.clone();
        for hh in h0..h0 + bh {
            for ww in w0..w0 + bw {
                let t = sign * sampler.angle.sample_one_sided_tangent(rng);
                tangents[hh * w + ww] = t;
                for ch in 0..c {
                    col[ch] = m.get(ch, hh, ww) - means[ch];
                }
                rotate_in_place(&pairing, t, &mut col);
                for ch in 0..c {
                    out.set(ch, hh, ww, col[ch] + means[ch]);
                }
            }
        }
        outputs.push(out);
        traces.push(MapRealization {
            rotation: RotationRealization::with_tangents(pairing, tangents),
            region,
        });
    }
    Ok((outputs, traces))
}

/// Sequence form: one pairing for the whole sequence, a fresh symmetric angle
/// per step.
pub fn fixed_direction_sequence<R: Rng + ?Sized>(
    xs: &[Vec<f64>],
    sampler: &RotationSampler,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let Some(first) = xs.first() else {
        return Ok(Vec::new());
    };
    let d = first.len();
    for x in xs {
        check_dim(d, x.len())?;
    }
    let pairing = sample_pairing(d, rng)?;
    Ok(xs
        .iter()
        .map(|x| {
            let t = sampler.angle.sample_tangent(rng);
            let mut y = x.clone();
            rotate_in_place(&pairing, t, &mut y);
            y
        })
        .collect())
}
