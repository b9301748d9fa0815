//! Batch normalization under noise and at small batch sizes.
//!
//! Two topics live here. The first is the variance shift between train and
//! test mode when dropout sits before a BN layer, either right after the
//! weight layer (`dropout-a`) or right before it (`dropout-b`). The second is
//! the nonlinearity of train-mode BN at small batch size: the expectation of
//! the normalized value given its test-mode counterpart is not the identity.
//!
//! Test-mode values are expressed in running-stat units, `t = (x - E[x]) /
//! sd(x)`, and curves are indexed by `t`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::mc::{derive_seed, map_chunks, map_indexed, stream_rng, CHUNK};
use crate::noise_lab::{noise_strength, FeatureSource};
use crate::stats::{relu_gaussian_moments, FeatureMoments, Moments, MomentsVec};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    /// Dropout on the weight layer's output, right before BN.
    #[serde(rename = "dropout-a")]
    DropoutA,
    /// Dropout on the weight layer's input.
    #[serde(rename = "dropout-b")]
    DropoutB,
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::DropoutA => "dropout-a",
            Placement::DropoutB => "dropout-b",
        })
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dropout-a" | "a" => Ok(Placement::DropoutA),
            "dropout-b" | "b" => Ok(Placement::DropoutB),
            other => Err(invalid("placement", format!("unknown placement {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ShiftUnit {
    pub var_train: f64,
    pub var_test: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShiftReport {
    pub placement: Placement,
    pub centered: bool,
    pub p: f64,
    pub dim: usize,
    pub units: Vec<ShiftUnit>,
    pub ratio_mean: f64,
    /// Population variance of the ratio over units.
    pub ratio_var: f64,
    pub ratio_max: f64,
}

fn quad(w: &[f64], m: &DMatrix<f64>) -> f64 {
    let d = w.len();
    let mut s = 0.0;
    for j in 0..d {
        let mut r = 0.0;
        for i in 0..d {
            r += m[(i, j)] * w[i];
        }
        s += r * w[j];
    }
    s
}

/// Train and test variance of `y = w·x` for every row `w` of `weights`.
///
/// Test variance is `wΣwᵀ`. Train variance adds the dropout term, which
/// uses `E[xxᵀ] = Σ + ccᵀ` unless `centered`, where only `Σ` is noised.
pub fn variance_shift(
    placement: Placement,
    centered: bool,
    p: f64,
    features: &FeatureMoments,
    weights: &DMatrix<f64>,
) -> Result<ShiftReport> {
    let lambda = noise_strength(p)?;
    let d = features.dim();
    check_dim(d, weights.ncols())?;
    let trace = features.cov.trace();
    if !(trace > 0.0) || features.cov.diagonal().iter().any(|&v| v < 0.0) {
        return Err(Error::DegenerateCovariance { trace });
    }
    let noised = if centered {
        features.cov.clone()
    } else {
        features.second_moment()
    };
    let mut units = Vec::with_capacity(weights.nrows());
    for row in weights.row_iter() {
        let w: Vec<f64> = row.iter().copied().collect();
        let var_test = quad(&w, &features.cov);
        let extra = match placement {
            Placement::DropoutA => quad(&w, &noised),
            Placement::DropoutB => (0..d).map(|j| w[j] * w[j] * noised[(j, j)]).sum(),
        };
        let var_train = var_test + lambda * extra;
        if !(var_test > 0.0) {
            return Err(invalid("weights", "a row has zero test variance"));
        }
        let ratio = (var_train / var_test).max(var_test / var_train);
        units.push(ShiftUnit {
            var_train,
            var_test,
            ratio,
        });
    }
    let n = units.len().max(1) as f64;
    let ratio_mean = units.iter().map(|u| u.ratio).sum::<f64>() / n;
    let ratio_var = units.iter().map(|u| (u.ratio - ratio_mean).powi(2)).sum::<f64>() / n;
    let ratio_max = units.iter().map(|u| u.ratio).fold(f64::NEG_INFINITY, f64::max);
    Ok(ShiftReport {
        placement,
        centered,
        p,
        dim: d,
        units,
        ratio_mean,
        ratio_var,
        ratio_max,
    })
}

/// Simulated train-mode variance of every unit, with stderr.
///
/// Dropout masks are Bernoulli with keep rate `p`. Centering subtracts the
/// population mean of whatever is being noised.
pub fn mc_train_variance(
    placement: Placement,
    centered: bool,
    p: f64,
    source: &FeatureSource,
    weights: &DMatrix<f64>,
    n: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    noise_strength(p)?;
    let d = source.dim();
    check_dim(d, weights.ncols())?;
    let m = weights.nrows();
    let c = source.moments()?.mean;
    let wc = weights * &c;
    let parts = map_chunks(seed, n, CHUNK / 4, |rng, count| {
        // Accumulate y and y² per unit; variance comes from the merged sums.
        let mut acc = MomentsVec::new(2 * m);
        let mut x = vec![0.0; d];
        let mut buf = vec![0.0; 2 * m];
        for _ in 0..count {
            source.sample_into(rng, &mut x);
            let y: DVector<f64> = match placement {
                Placement::DropoutA => {
                    let mut y = weights * DVector::from_column_slice(&x);
                    for i in 0..m {
                        let keep = if rng.random::<f64>() < p { 1.0 / p } else { 0.0 };
                        let base = if centered { wc[i] } else { 0.0 };
                        y[i] = (y[i] - base) * keep + base;
                    }
                    y
                }
                Placement::DropoutB => {
                    for j in 0..d {
                        let keep = if rng.random::<f64>() < p { 1.0 / p } else { 0.0 };
                        let base = if centered { c[j] } else { 0.0 };
                        x[j] = (x[j] - base) * keep + base;
                    }
                    weights * DVector::from_column_slice(&x)
                }
            };
            for i in 0..m {
                buf[i] = y[i];
                buf[m + i] = y[i] * y[i];
            }
            acc.push(&buf);
        }
        acc
    });
    let mut acc = MomentsVec::new(2 * m);
    for part in parts {
        crate::mc::Merge::merge(&mut acc, part);
    }
    let items = acc.items();
    let count = items[0].count() as f64;
    let mut var = Vec::with_capacity(m);
    let mut se = Vec::with_capacity(m);
    for i in 0..m {
        let mean = items[i].mean();
        var.push((items[m + i].mean() - mean * mean) * count / (count - 1.0));
        // Delta-method stderr, dominated by the second-moment term.
        se.push(items[m + i].stderr() + 2.0 * mean.abs() * items[i].stderr());
    }
    Ok((var, se))
}

/// `n` rows drawn uniformly from the unit sphere in `R^d`.
pub fn sphere_rows<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> DMatrix<f64> {
    let mut w = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    for mut row in w.row_iter_mut() {
        let norm = row.norm();
        row /= norm;
    }
    w
}

/// A random pre-activation covariance `AAᵀ / d` with standard-normal `A`.
pub fn wishart_covariance<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&a * a.transpose()) / d as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ObservationTrial {
    pub var_ratio_a: f64,
    pub var_ratio_b: f64,
    pub max_ratio_a: f64,
    pub max_ratio_b: f64,
}

impl ObservationTrial {
    /// Dropout-b ratios are both less spread and less extreme.
    pub fn holds(&self) -> bool {
        self.var_ratio_b < self.var_ratio_a && self.max_ratio_a > self.max_ratio_b
    }
}

/// One repetition of the dropout-a versus dropout-b comparison on ReLU
/// features of a random Gaussian layer, with sphere-sampled weight rows.
pub fn observation_trial(dim: usize, rows: usize, p: f64, seed: u64) -> Result<ObservationTrial> {
    let mut rng = stream_rng(seed, 0);
    let features = relu_gaussian_moments(&wishart_covariance(dim, &mut rng))?;
    let w = sphere_rows(rows, dim, &mut rng);
    let a = variance_shift(Placement::DropoutA, false, p, &features, &w)?;
    let b = variance_shift(Placement::DropoutB, false, p, &features, &w)?;
    Ok(ObservationTrial {
        var_ratio_a: a.ratio_var,
        var_ratio_b: b.ratio_var,
        max_ratio_a: a.ratio_max,
        max_ratio_b: b.ratio_max,
    })
}

/// Running statistics and affine parameters of a BN layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    populated: bool,
}

impl BatchNormState {
    pub fn new(dim: usize) -> Self {
        Self {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            populated: false,
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(invalid("eps", format!("{eps} must be positive")));
        }
        self.eps = eps;
        Ok(self)
    }

    pub fn with_momentum(mut self, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(invalid("momentum", format!("{momentum} not in (0, 1]")));
        }
        self.momentum = momentum;
        Ok(self)
    }

    /// Overwrites the running statistics.
    pub fn set_running(&mut self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        check_dim(self.dim(), mean.len())?;
        check_dim(self.dim(), var.len())?;
        if var.iter().any(|&v| !(v >= 0.0)) {
            return Err(invalid("running_var", "must be non-negative"));
        }
        self.running_mean = mean;
        self.running_var = var;
        self.populated = true;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_populated(&self) -> bool {
        self.populated
    }
}

/// Per-column batch mean and biased variance.
pub fn batch_stats(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let b = x.nrows() as f64;
    x.column_iter()
        .map(|c| {
            let mu = c.sum() / b;
            let var = c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / b;
            (mu, var)
        })
        .unzip()
}

/// Train-mode BN on a B × D batch; updates the running statistics.
pub fn bn_train_forward(x: &DMatrix<f64>, state: &mut BatchNormState) -> Result<DMatrix<f64>> {
    let (b, d) = x.shape();
    check_dim(state.dim(), d)?;
    if b < 2 {
        return Err(Error::BatchTooSmall {
            what: "batch normalization",
            needed: 2,
            got: b,
        });
    }
    let (mu, var) = batch_stats(x);
    let unbias = b as f64 / (b as f64 - 1.0);
    let m = state.momentum;
    for j in 0..d {
        state.running_mean[j] = (1.0 - m) * state.running_mean[j] + m * mu[j];
        state.running_var[j] = (1.0 - m) * state.running_var[j] + m * unbias * var[j];
    }
    state.populated = true;
    Ok(DMatrix::from_fn(b, d, |i, j| {
        state.gamma[j] * (x[(i, j)] - mu[j]) / (var[j] + state.eps).sqrt() + state.beta[j]
    }))
}

/// Odd degree-7 polynomial `a₁t + a₃t³ + a₅t⁵ + a₇t⁷`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OddPoly {
    pub a1: f64,
    pub a3: f64,
    pub a5: f64,
    pub a7: f64,
}

impl OddPoly {
    pub const IDENTITY: OddPoly = OddPoly {
        a1: 1.0,
        a3: 0.0,
        a5: 0.0,
        a7: 0.0,
    };

    pub fn eval(&self, t: f64) -> f64 {
        let t2 = t * t;
        t * (self.a1 + t2 * (self.a3 + t2 * (self.a5 + t2 * self.a7)))
    }

    pub fn coefficients(&self) -> [f64; 4] {
        [self.a1, self.a3, self.a5, self.a7]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TestCorrection {
    None,
    /// Divide the running variance by `1/p`, i.e. scale it by `p`.
    ScaleRunningVar {
        p: f64,
    },
    Poly(OddPoly),
}

/// Test-mode BN with an optional correction.
pub fn bn_test_forward(x: &DMatrix<f64>, state: &BatchNormState, correction: &TestCorrection) -> Result<DMatrix<f64>> {
    if !state.populated {
        return Err(Error::StatsNotPopulated);
    }
    check_dim(state.dim(), x.ncols())?;
    let scale = match *correction {
        TestCorrection::ScaleRunningVar { p } => {
            noise_strength(p)?;
            p
        }
        _ => 1.0,
    };
    Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        let mut t = (x[(i, j)] - state.running_mean[j]) / (state.running_var[j] * scale + state.eps).sqrt();
        if let TestCorrection::Poly(poly) = correction {
            t = poly.eval(t);
        }
        state.gamma[j] * t + state.beta[j]
    }))
}

/// Unit sources for the small-batch curves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceDistribution {
    Gaussian,
    /// `Unif(0, 1)`.
    Uniform,
    /// `y²`, `y ~ Unif(0, 1)`.
    UniformSquare,
    /// `y³`, `y ~ Unif(0, 1)`.
    UniformCube,
    /// `Laplace(0, 1)`.
    Laplace,
}

impl SourceDistribution {
    pub const ALL: [SourceDistribution; 5] = [
        Self::Gaussian,
        Self::Uniform,
        Self::UniformSquare,
        Self::UniformCube,
        Self::Laplace,
    ];

    pub fn mean(self) -> f64 {
        match self {
            Self::Gaussian | Self::Laplace => 0.0,
            Self::Uniform => 0.5,
            Self::UniformSquare => 1.0 / 3.0,
            Self::UniformCube => 0.25,
        }
    }

    pub fn variance(self) -> f64 {
        match self {
            Self::Gaussian => 1.0,
            Self::Uniform => 1.0 / 12.0,
            Self::UniformSquare => 4.0 / 45.0,
            Self::UniformCube => 9.0 / 112.0,
            Self::Laplace => 2.0,
        }
    }

    pub fn sd(self) -> f64 {
        self.variance().sqrt()
    }

    pub fn density(self, x: f64) -> f64 {
        let inside = x > 0.0 && x <= 1.0;
        match self {
            Self::Gaussian => (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            Self::Uniform => f64::from(u8::from(inside)),
            Self::UniformSquare if inside => 0.5 / x.sqrt(),
            Self::UniformCube if inside => x.powf(-2.0 / 3.0) / 3.0,
            Self::UniformSquare | Self::UniformCube => 0.0,
            Self::Laplace => 0.5 * (-x.abs()).exp(),
        }
    }

    /// Density of the standardized value `t = (x - mean) / sd`.
    pub fn standardized_density(self, t: f64) -> f64 {
        let s = self.sd();
        s * self.density(self.mean() + s * t)
    }

    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            Self::Gaussian => rng.sample(StandardNormal),
            Self::Uniform => rng.random(),
            Self::UniformSquare => rng.random::<f64>().powi(2),
            Self::UniformCube => rng.random::<f64>().powi(3),
            Self::Laplace => {
                let u: f64 = rng.random::<f64>() - 0.5;
                -u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
        }
    }

    pub fn is_symmetric(self) -> bool {
        matches!(self, Self::Gaussian | Self::Laplace)
    }
}

impl fmt::Display for SourceDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gaussian",
            Self::Uniform => "uniform",
            Self::UniformSquare => "uniform-square",
            Self::UniformCube => "uniform-cube",
            Self::Laplace => "laplace",
        })
    }
}

impl FromStr for SourceDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.to_string() == s)
            .ok_or_else(|| Error::UnknownDistribution(s.to_string()))
    }
}

/// `(x - μ_B) / σ_B` written through the statistics of the other `B - 1`
/// values (biased variance), which do not depend on `x`.
pub fn loo_normalized(x: f64, rest_mean: f64, rest_var: f64, b: usize) -> f64 {
    let bf = b as f64;
    let d = x - rest_mean;
    ((bf - 1.0) / bf).sqrt() * d / (rest_var + d * d / bf).sqrt()
}

/// `(x₀ - μ_B) / σ_B` computed directly from the whole batch.
/// Deviations are taken from `x₀` first to avoid cancellation when values
/// nearly coincide.
pub fn direct_normalized(batch: &[f64]) -> f64 {
    let shifted: Vec<f64> = batch.iter().map(|v| v - batch[0]).collect();
    let (mu, var) = mean_and_biased_var(&shifted);
    -mu / var.sqrt()
}

fn mean_and_biased_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    (mu, xs.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    /// Test-mode value `t`.
    pub x_test: f64,
    pub f_expect: f64,
    pub stderr: f64,
    /// Variance of the train-mode value at this `t`.
    pub f_var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NonlinearityCurve {
    pub dist: SourceDistribution,
    pub batch: usize,
    pub points: Vec<CurvePoint>,
}

/// Evenly spaced grid from `lo` to `hi` inclusive.
pub fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| lo + step * k as f64).collect()
}

/// Train-mode expectation and variance at each test-mode value of `grid`.
/// Each grid point draws `n_mc` companion sets on its own seed.
pub fn mc_nonlinearity_curve(
    dist: SourceDistribution,
    batch: usize,
    grid: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<NonlinearityCurve> {
    if batch < 2 {
        return Err(Error::BatchTooSmall {
            what: "nonlinearity curve",
            needed: 2,
            got: batch,
        });
    }
    if n_mc < 2 {
        return Err(invalid("n_mc", "need at least two draws"));
    }
    let (m, s) = (dist.mean(), dist.sd());
    let points = map_indexed(grid.len(), |k| {
        let t = grid[k];
        let x = m + s * t;
        let mut rng = stream_rng(derive_seed(seed, k as u64), 0);
        let mut rest = vec![0.0; batch - 1];
        let mut acc = Moments::new();
        for _ in 0..n_mc {
            rest.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
            let (mu, var) = mean_and_biased_var(&rest);
            acc.push(loo_normalized(x, mu, var, batch));
        }
        CurvePoint {
            x_test: t,
            f_expect: acc.mean(),
            stderr: acc.stderr(),
            f_var: acc.variance(),
        }
    });
    Ok(NonlinearityCurve { dist, batch, points })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitWeighting {
    /// Every grid point counts equally.
    Uniform,
    /// Points weighted by the source density at the grid value.
    Density,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PolyFit {
    pub batch: usize,
    pub poly: OddPoly,
    /// Unweighted residual RMS over points with positive weight.
    pub rmse: f64,
}

/// Weighted least-squares odd polynomial from test-mode values to `f_Expect`.
pub fn fit_poly_correction(curve: &NonlinearityCurve, weighting: FitWeighting) -> Result<PolyFit> {
    let used: Vec<(f64, f64, f64)> = curve
        .points
        .iter()
        .map(|p| {
            let w = match weighting {
                FitWeighting::Uniform => 1.0,
                FitWeighting::Density => curve.dist.standardized_density(p.x_test),
            };
            (p.x_test, p.f_expect, w)
        })
        .filter(|&(_, _, w)| w > 0.0)
        .collect();
    if used.len() < 4 {
        return Err(invalid(
            "curve",
            format!("need at least 4 weighted points, got {}", used.len()),
        ));
    }
    let n = used.len();
    let a = DMatrix::from_fn(n, 4, |i, j| {
        let (t, _, w) = used[i];
        w.sqrt() * t.powi(2 * j as i32 + 1)
    });
    let b = DVector::from_fn(n, |i, _| used[i].2.sqrt() * used[i].1);
    let c = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| invalid("curve", e.to_string()))?;
    let poly = OddPoly {
        a1: c[0],
        a3: c[1],
        a5: c[2],
        a7: c[3],
    };
    let rmse = (used.iter().map(|&(t, y, _)| (poly.eval(t) - y).powi(2)).sum::<f64>() / n as f64).sqrt();
    Ok(PolyFit {
        batch: curve.batch,
        poly,
        rmse,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LooNormalizer {
    /// Divide the sums over the other elements by `B - 1`.
    #[default]
    ExceptSelf,
    /// Divide by the full batch size `B`.
    FullBatch,
}

/// Mean and variance of `column` without element `i`.
pub fn leave_one_out_stats(column: &[f64], i: usize, normalizer: LooNormalizer) -> (f64, f64) {
    let b = column.len();
    let den = match normalizer {
        LooNormalizer::ExceptSelf => (b - 1) as f64,
        LooNormalizer::FullBatch => b as f64,
    };
    let others = || column.iter().enumerate().filter(move |&(k, _)| k != i).map(|(_, v)| *v);
    let mu = others().sum::<f64>() / den;
    let var = others().map(|v| (v - mu).powi(2)).sum::<f64>() / den;
    (mu, var)
}

/// Cross-normalization: every element is normalized by the statistics of
/// the rest of its column.
pub fn cross_normalize(
    x: &DMatrix<f64>,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    normalizer: LooNormalizer,
) -> Result<DMatrix<f64>> {
    let (b, d) = x.shape();
    check_dim(d, gamma.len())?;
    check_dim(d, beta.len())?;
    if b < 3 {
        return Err(Error::BatchTooSmall {
            what: "cross-normalization",
            needed: 3,
            got: b,
        });
    }
    let mut out = DMatrix::zeros(b, d);
    for j in 0..d {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        for i in 0..b {
            let (mu, var) = leave_one_out_stats(&col, i, normalizer);
            out[(i, j)] = gamma[j] * (col[i] - mu) / (var + eps).sqrt() + beta[j];
        }
    }
    Ok(out)
}

/// Expected cross-normalized value of one element as a function of its
/// test-mode value. All grid points reuse the same companion draws, so the
/// curve keeps the per-draw shape, which for CN is affine in the element.
pub fn mc_cross_norm_curve(
    dist: SourceDistribution,
    batch: usize,
    grid: &[f64],
    n_mc: usize,
    eps: f64,
    normalizer: LooNormalizer,
    seed: u64,
) -> Result<NonlinearityCurve> {
    if batch < 3 {
        return Err(Error::BatchTooSmall {
            what: "cross-normalization",
            needed: 3,
            got: batch,
        });
    }
    if n_mc < 2 {
        return Err(invalid("n_mc", "need at least two draws"));
    }
    if !(eps >= 0.0) {
        return Err(invalid("eps", "must be non-negative"));
    }
    let (m, s) = (dist.mean(), dist.sd());
    let points = map_indexed(grid.len(), |k| {
        let x = m + s * grid[k];
        let mut rng = stream_rng(seed, 0);
        let mut column = vec![0.0; batch];
        let mut acc = Moments::new();
        for _ in 0..n_mc {
            column[0] = x;
            column[1..].iter_mut().for_each(|v| *v = dist.sample(&mut rng));
            let (mu, var) = leave_one_out_stats(&column, 0, normalizer);
            acc.push((x - mu) / (var + eps).sqrt());
        }
        CurvePoint {
            x_test: grid[k],
            f_expect: acc.mean(),
            stderr: acc.stderr(),
            f_var: acc.variance(),
        }
    });
    Ok(NonlinearityCurve { dist, batch, points })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AffineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Largest `|residual| / stderr` over the curve.
    pub max_z: f64,
}

/// Least-squares line through a curve's expectations.
pub fn affine_fit(curve: &NonlinearityCurve) -> Result<AffineFit> {
    let n = curve.points.len();
    if n < 3 {
        return Err(invalid("curve", format!("need at least 3 points, got {n}")));
    }
    let nf = n as f64;
    let mx = curve.points.iter().map(|p| p.x_test).sum::<f64>() / nf;
    let my = curve.points.iter().map(|p| p.f_expect).sum::<f64>() / nf;
    let sxx: f64 = curve.points.iter().map(|p| (p.x_test - mx).powi(2)).sum();
    let sxy: f64 = curve.points.iter().map(|p| (p.x_test - mx) * (p.f_expect - my)).sum();
    if !(sxx > 0.0) {
        return Err(invalid("curve", "grid has no spread"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let max_z = curve
        .points
        .iter()
        .map(|p| {
            let r = (p.f_expect - slope * p.x_test - intercept).abs();
            if r == 0.0 {
                0.0
            } else {
                r / p.stderr
            }
        })
        .fold(0.0, f64::max);
    Ok(AffineFit {
        slope,
        intercept,
        max_z,
    })
}

/// `E[Var[f_Train | x]]` for `x` from `dist`: `outer` values of `x`, each
/// with `inner` companion sets. Returns mean and stderr.
pub fn noise_budget(
    batch: usize,
    dist: SourceDistribution,
    outer: usize,
    inner: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if batch < 2 {
        return Err(Error::BatchTooSmall {
            what: "noise budget",
            needed: 2,
            got: batch,
        });
    }
    if inner < 2 || outer < 2 {
        return Err(invalid("n_mc", "need at least two inner and outer draws"));
    }
    let parts = map_chunks(seed, outer, 16, |rng, count| {
        let mut acc = Moments::new();
        let mut rest = vec![0.0; batch - 1];
        for _ in 0..count {
            let x = dist.sample(rng);
            let mut f = Moments::new();
            for _ in 0..inner {
                rest.iter_mut().for_each(|v| *v = dist.sample(rng));
                let (mu, var) = mean_and_biased_var(&rest);
                f.push(loo_normalized(x, mu, var, batch));
            }
            acc.push(f.variance());
        }
        acc
    });
    let mut acc = Moments::new();
    parts.into_iter().for_each(|p| crate::mc::Merge::merge(&mut acc, p));
    Ok((acc.mean(), acc.stderr()))
}

/// Variance of the train-mode normalized first element over `n` i.i.d.
/// batches (`ε = 0`), with stderr. Its mean is exactly zero by symmetry, so
/// the estimate is the mean square.
pub fn train_output_variance(batch: usize, dist: SourceDistribution, n: usize, seed: u64) -> Result<(f64, f64)> {
    if batch < 2 {
        return Err(Error::BatchTooSmall {
            what: "batch normalization",
            needed: 2,
            got: batch,
        });
    }
    let parts = map_chunks(seed, n, CHUNK, |rng, count| {
        let mut acc = Moments::new();
        let mut xs = vec![0.0; batch];
        for _ in 0..count {
            xs.iter_mut().for_each(|v| *v = dist.sample(rng));
            acc.push(direct_normalized(&xs).powi(2));
        }
        acc
    });
    let mut acc = Moments::new();
    parts.into_iter().for_each(|p| crate::mc::Merge::merge(&mut acc, p));
    Ok((acc.mean(), acc.stderr()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise_lab::GaussianSource;

    #[test]
    fn cross_norm_expectation_is_affine_but_bn_is_not() {
        let xs = grid(-3.0, 3.0, 0.25);
        for dist in [SourceDistribution::Gaussian, SourceDistribution::Laplace] {
            let cn = mc_cross_norm_curve(dist, 8, &xs, 20_000, 1e-5, LooNormalizer::ExceptSelf, 3).unwrap();
            let fit = affine_fit(&cn).unwrap();
            assert!(fit.max_z < 3.0, "{dist}: {fit:?}");
            assert!(fit.slope > 1.0);
        }
        let bn = mc_nonlinearity_curve(SourceDistribution::Gaussian, 8, &xs, 20_000, 3).unwrap();
        assert!(affine_fit(&bn).unwrap().max_z > 10.0);
    }

    #[test]
    fn centered_dropout_a_ratio_is_inverse_keep_rate() {
        let mut rng = stream_rng(1, 0);
        let f = relu_gaussian_moments(&wishart_covariance(16, &mut rng)).unwrap();
        let w = sphere_rows(64, 16, &mut rng);
        let r = variance_shift(Placement::DropoutA, true, 0.5, &f, &w).unwrap();
        assert!(r.units.iter().all(|u| (u.ratio - 2.0).abs() < 1e-12));
        assert!(r.ratio_var < 1e-24);
        for placement in [Placement::DropoutA, Placement::DropoutB] {
            let r = variance_shift(placement, false, 1.0, &f, &w).unwrap();
            assert!(r.units.iter().all(|u| u.ratio == 1.0));
        }
        let zero = FeatureMoments::centered(DMatrix::zeros(16, 16)).unwrap();
        assert!(variance_shift(Placement::DropoutB, false, 0.5, &zero, &w).is_err());
    }

    #[test]
    fn closed_form_shift_matches_simulation() {
        let mut rng = stream_rng(2, 0);
        let d = 6;
        let src = FeatureSource::ReluGaussian(
            GaussianSource::new(DVector::zeros(d), wishart_covariance(d, &mut rng)).unwrap(),
        );
        let f = src.moments().unwrap();
        let w = sphere_rows(3, d, &mut rng);
        for placement in [Placement::DropoutA, Placement::DropoutB] {
            for centered in [false, true] {
                let r = variance_shift(placement, centered, 0.6, &f, &w).unwrap();
                let (mc, se) = mc_train_variance(placement, centered, 0.6, &src, &w, 200_000, 3).unwrap();
                for (u, (v, s)) in r.units.iter().zip(mc.iter().zip(&se)) {
                    assert!(
                        (u.var_train - v).abs() < 5.0 * s,
                        "{placement} {centered}: {} vs {v} ± {s}",
                        u.var_train
                    );
                }
            }
        }
    }

    #[test]
    fn expected_shift_is_shared_across_placements() {
        let mut rng = stream_rng(3, 0);
        let f = relu_gaussian_moments(&wishart_covariance(32, &mut rng)).unwrap();
        let w = sphere_rows(4000, 32, &mut rng);
        let a = variance_shift(Placement::DropoutA, false, 0.5, &f, &w).unwrap();
        let b = variance_shift(Placement::DropoutB, false, 0.5, &f, &w).unwrap();
        let diff: Moments = a
            .units
            .iter()
            .zip(&b.units)
            .map(|(ua, ub)| (ua.var_train - ua.var_test) - (ub.var_train - ub.var_test))
            .collect();
        assert!(diff.mean().abs() < 5.0 * diff.stderr());
    }

    #[test]
    fn observation_on_a_few_seeds() {
        let held = (0..10)
            .filter(|&s| observation_trial(64, 256, 0.5, s).unwrap().holds())
            .count();
        assert!(held >= 9, "{held}");
    }

    #[test]
    fn train_forward_identities() {
        let mut st = BatchNormState::new(2);
        let x = DMatrix::from_row_slice(4, 2, &[3.0, 1.0, 3.0, 2.0, 3.0, -4.0, 3.0, 0.5]);
        let y = bn_train_forward(&x, &mut st).unwrap();
        assert!(y.column(0).iter().all(|&v| v == 0.0));
        let (_, var) = batch_stats(&x);
        let ss: f64 = y.column(1).iter().map(|v| v * v).sum();
        assert!((ss - 4.0 * var[1] / (var[1] + st.eps)).abs() < 1e-12);
        assert!((st.running_mean[1] - 0.1 * (-0.125)).abs() < 1e-15);
        assert!((st.running_var[1] - (0.9 + 0.1 * 4.0 / 3.0 * var[1])).abs() < 1e-12);
        assert!(bn_train_forward(&x.rows(0, 1).into_owned(), &mut st).is_err());
    }

    #[test]
    fn test_forward_corrections() {
        let st = BatchNormState::new(1);
        let x = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert!(matches!(
            bn_test_forward(&x, &st, &TestCorrection::None),
            Err(Error::StatsNotPopulated)
        ));
        let mut st = st;
        st.set_running(vec![0.5], vec![4.0]).unwrap();
        let plain = bn_test_forward(&x, &st, &TestCorrection::None).unwrap();
        let id = bn_test_forward(&x, &st, &TestCorrection::Poly(OddPoly::IDENTITY)).unwrap();
        assert_eq!(plain, id);
        let half = bn_test_forward(&x, &st, &TestCorrection::ScaleRunningVar { p: 0.5 }).unwrap();
        assert!((half[(0, 0)] - 0.5 / (2.0 + st.eps).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn leave_one_out_identity_is_exact() {
        let mut rng = stream_rng(4, 0);
        for b in [2usize, 3, 8, 32] {
            for _ in 0..200 {
                let xs: Vec<f64> = (0..b).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let (mu, var) = mean_and_biased_var(&xs[1..]);
                let l = loo_normalized(xs[0], mu, var, b);
                let r = direct_normalized(&xs);
                assert!((l - r).abs() <= 1e-12 * r.abs().max(1.0), "B={b}: {l} vs {r}");
            }
        }
    }

    #[test]
    fn curve_properties() {
        let g = grid(-3.0, 3.0, 0.5);
        assert_eq!(g.len(), 13);
        let c = mc_nonlinearity_curve(SourceDistribution::Gaussian, 8, &g, 20_000, 5).unwrap();
        let bound = 7.0 / 8f64.sqrt();
        assert!(c.points.iter().all(|p| p.f_expect.abs() <= bound));
        let mid = &c.points[6];
        assert!(mid.f_expect.abs() < 4.0 * mid.stderr);
        for k in 0..6 {
            let (a, b) = (&c.points[k], &c.points[12 - k]);
            assert!((a.f_expect + b.f_expect).abs() < 4.0 * a.stderr.hypot(b.stderr));
        }
        for w in c.points.windows(2) {
            assert!(w[1].f_expect >= w[0].f_expect - 4.0 * w[0].stderr.hypot(w[1].stderr));
        }
        assert!(matches!(
            "cauchy".parse::<SourceDistribution>(),
            Err(Error::UnknownDistribution(_))
        ));
    }

    #[test]
    fn poly_fit_cases() {
        let linear = NonlinearityCurve {
            dist: SourceDistribution::Gaussian,
            batch: 8,
            points: grid(-3.0, 3.0, 0.25)
                .into_iter()
                .map(|t| CurvePoint {
                    x_test: t,
                    f_expect: t,
                    stderr: 0.0,
                    f_var: 0.0,
                })
                .collect(),
        };
        for w in [FitWeighting::Uniform, FitWeighting::Density] {
            let f = fit_poly_correction(&linear, w).unwrap();
            let c = f.poly.coefficients();
            assert!(
                (c[0] - 1.0).abs() < 1e-10 && c[1..].iter().all(|v| v.abs() < 1e-10),
                "{c:?}"
            );
        }
        let short = NonlinearityCurve {
            points: linear.points[..3].to_vec(),
            ..linear.clone()
        };
        assert!(fit_poly_correction(&short, FitWeighting::Uniform).is_err());
    }

    #[test]
    fn large_batch_fit_is_near_identity() {
        let c = mc_nonlinearity_curve(SourceDistribution::Gaussian, 256, &grid(-4.0, 4.0, 0.25), 4000, 6).unwrap();
        let f = fit_poly_correction(&c, FitWeighting::Density).unwrap();
        assert!((f.poly.a1 - 1.0).abs() < 0.02, "{:?}", f.poly);
        assert!(f.poly.a3.abs() < 0.01 && f.poly.a5.abs() < 0.002 && f.poly.a7.abs() < 1e-4);
    }

    #[test]
    fn cross_normalize_cases() {
        let x = DMatrix::from_element(5, 2, 1.5);
        let y = cross_normalize(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-5, LooNormalizer::ExceptSelf).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(cross_normalize(
            &x.rows(0, 2).into_owned(),
            &[1.0; 2],
            &[0.0; 2],
            1e-5,
            LooNormalizer::ExceptSelf
        )
        .is_err());
        let col = [0.3, -1.0, 2.0, 0.7];
        let before = leave_one_out_stats(&col, 2, LooNormalizer::ExceptSelf);
        let mut moved = col;
        moved[2] = 123.0;
        assert_eq!(before, leave_one_out_stats(&moved, 2, LooNormalizer::ExceptSelf));
        let (mu, var) = leave_one_out_stats(&col, 0, LooNormalizer::FullBatch);
        assert!((mu - 1.7 / 4.0).abs() < 1e-15 && var > 0.0);
    }

    #[test]
    fn cross_normalize_is_affine_in_expectation() {
        let ts = grid(-2.0, 2.0, 0.5);
        let pts: Vec<(f64, Moments)> = ts
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let mut rng = stream_rng(7, k as u64);
                let mut m = Moments::new();
                let mut batch = DMatrix::zeros(8, 1);
                for _ in 0..20_000 {
                    batch[(0, 0)] = x;
                    for i in 1..8 {
                        batch[(i, 0)] = rng.sample::<f64, _>(StandardNormal);
                    }
                    let y = cross_normalize(&batch, &[1.0], &[0.0], 1e-5, LooNormalizer::ExceptSelf).unwrap();
                    m.push(y[(0, 0)]);
                }
                (x, m)
            })
            .collect();
        let n = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, m)| (a + x, b + m.mean()));
        let (mx, my) = (sx / n, sy / n);
        let slope = pts.iter().map(|(x, m)| (x - mx) * (m.mean() - my)).sum::<f64>()
            / pts.iter().map(|(x, _)| (x - mx).powi(2)).sum::<f64>();
        for (x, m) in &pts {
            let fit = my + slope * (x - mx);
            assert!((m.mean() - fit).abs() < 3.0 * m.stderr(), "x={x}");
        }
    }

    #[test]
    fn train_output_variance_is_one() {
        for dist in SourceDistribution::ALL {
            for b in [2usize, 4, 8, 32] {
                let (v, se) = train_output_variance(b, dist, 20_000, 8).unwrap();
                assert!((v - 1.0).abs() <= 5.0 * se + 1e-12, "{dist} B={b}: {v} ± {se}");
            }
        }
    }

    #[test]
    fn distributions_have_stated_moments() {
        for dist in SourceDistribution::ALL {
            let mut rng = stream_rng(9, 0);
            let m: Moments = (0..200_000).map(|_| dist.sample(&mut rng)).collect();
            assert!((m.mean() - dist.mean()).abs() < 5.0 * m.stderr(), "{dist}");
            assert!((m.variance() / dist.variance() - 1.0).abs() < 0.03, "{dist}");
            assert_eq!(dist.to_string().parse::<SourceDistribution>().unwrap(), dist);
            // Standardized densities integrate to one.
            let h = 1e-3;
            let total: f64 = (0..20_000)
                .map(|k| dist.standardized_density(-10.0 + h * (k as f64 + 0.5)) * h)
                .sum();
            // Midpoint rule converges slowly at the singular densities.
            assert!((total - 1.0).abs() < 0.03, "{dist}: {total}");
        }
    }

    #[test]
    fn noise_budget_small_case() {
        let (v, se) = noise_budget(4, SourceDistribution::Gaussian, 200, 200, 10).unwrap();
        assert!(v < 0.5 && v > 0.2, "{v} ± {se}");
    }
}
