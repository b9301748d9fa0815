//! Co-adaptation and the variance algebra of dropout and rotation noise.
//!
//! The closed forms here are checked against Monte Carlo in the tests and in
//! the acceptance suite. Strength is always given as a keep rate `p`, with
//! `λ = (1 - p) / p`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::mc::{map_chunks, Merge, CHUNK};
use crate::regularizers::{BernoulliDropout, NoiseOp, RotationOut};
use crate::rotation::AngleDistribution;
use crate::stats::{relu_gaussian_moments, CovAccumulator, FeatureMoments, Moments, OuterMoments};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dropout,
    Rotation,
}

impl Method {
    /// Dense op at keep rate `p`; rotation uses Gaussian tangents.
    pub fn op(self, p: f64) -> Result<Box<dyn NoiseOp>> {
        Ok(match self {
            Method::Dropout => Box::new(BernoulliDropout::new(p)?),
            Method::Rotation => Box::new(RotationOut::new(AngleDistribution::gaussian_for_keep_rate(p)?)?),
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Dropout => "dropout",
            Method::Rotation => "rotation",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dropout" => Ok(Method::Dropout),
            "rotation" => Ok(Method::Rotation),
            other => Err(invalid("method", format!("unknown method {other:?}"))),
        }
    }
}

/// `λ = (1 - p) / p` for a keep rate in `(0, 1]`.
pub fn noise_strength(p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(invalid("keep_rate", format!("{p} not in (0, 1]")));
    }
    Ok((1.0 - p) / p)
}

/// Inverse probability that two given coordinates share a pair.
///
/// `D - 1` for even `D`. For odd `D` one coordinate is left fixed, which
/// lowers the pairing probability to `1 / D`.
pub fn coupling_denominator(dim: usize) -> f64 {
    if dim.is_multiple_of(2) {
        (dim - 1) as f64
    } else {
        dim as f64
    }
}

/// `‖Σ - diag Σ‖₁ / tr Σ` with the entrywise L1 norm.
pub fn coadaptation(cov: &DMatrix<f64>) -> Result<f64> {
    check_dim(cov.nrows(), cov.ncols())?;
    let trace = cov.trace();
    if !(trace > 0.0) {
        return Err(Error::DegenerateCovariance { trace });
    }
    let mut off = 0.0;
    for j in 0..cov.ncols() {
        for i in 0..cov.nrows() {
            if i != j {
                off += cov[(i, j)].abs();
            }
        }
    }
    Ok(off / trace)
}

/// `Var[x̃ | x]` of the noise op at keep rate `p`.
pub fn lemma1_conditional_variance(x: &[f64], method: Method, p: f64) -> Result<DMatrix<f64>> {
    let lambda = noise_strength(p)?;
    let d = x.len();
    let x = DVector::from_column_slice(x);
    match method {
        Method::Dropout => Ok(DMatrix::from_diagonal(&x.map(|v| lambda * v * v))),
        Method::Rotation => {
            if d < 2 {
                return Err(Error::DimensionTooSmall { dim: d });
            }
            let s = DMatrix::identity(d, d) * x.norm_squared() - &x * x.transpose();
            Ok(s * (lambda / coupling_denominator(d)))
        }
    }
}

/// `Var[x̃]` when `x` has mean `c` and covariance `Σ` (law of total variance).
pub fn total_variance(m: &FeatureMoments, method: Method, p: f64) -> Result<DMatrix<f64>> {
    let lambda = noise_strength(p)?;
    let d = m.dim();
    let second = m.second_moment();
    match method {
        Method::Dropout => Ok(&m.cov + DMatrix::from_diagonal(&second.diagonal()) * lambda),
        Method::Rotation => {
            if d < 2 {
                return Err(Error::DimensionTooSmall { dim: d });
            }
            let inner = DMatrix::identity(d, d) * second.trace() - second;
            Ok(&m.cov + inner * (lambda / coupling_denominator(d)))
        }
    }
}

/// Factor by which the op scales co-adaptation of centered features:
/// `p` for dropout, `p - (1 - p) / (D - 1)` for rotation.
pub fn reduction_factor(method: Method, p: f64, dim: usize) -> f64 {
    match method {
        Method::Dropout => p,
        Method::Rotation => p - (1.0 - p) / (dim as f64 - 1.0),
    }
}

/// `co(Var[x̃]) / co(Σ)` from the closed forms. `None` when `Σ` is diagonal.
pub fn predicted_factor(m: &FeatureMoments, method: Method, p: f64) -> Result<Option<f64>> {
    let before = coadaptation(&m.cov)?;
    if before == 0.0 {
        return Ok(None);
    }
    Ok(Some(coadaptation(&total_variance(m, method, p)?)? / before))
}

/// `N(mean, cov)` sampled through a Cholesky factor.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSource {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl GaussianSource {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim(mean.len(), cov.nrows())?;
        check_dim(mean.len(), cov.ncols())?;
        let factor = Cholesky::new(cov.clone())
            .ok_or_else(|| invalid("cov", "covariance is not positive definite"))?
            .unpack();
        Ok(Self { mean, cov, factor })
    }

    /// Unit variances, all correlations `rho`.
    pub fn equicorrelated(dim: usize, rho: f64) -> Result<Self> {
        if dim < 1 {
            return Err(invalid("dim", "need at least one coordinate"));
        }
        let cov = DMatrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { rho });
        Self::new(DVector::zeros(dim), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.dim();
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..d {
            let mut v = self.mean[i];
            for k in 0..=i {
                v += self.factor[(i, k)] * z[k];
            }
            out[i] = v;
        }
    }
}

/// Features whose co-adaptation is measured.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSource {
    Gaussian(GaussianSource),
    /// `ReLU(z)` with `z` from a zero-mean Gaussian source.
    ReluGaussian(GaussianSource),
}

impl FeatureSource {
    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian(g) | Self::ReluGaussian(g) => g.dim(),
        }
    }

    pub fn moments(&self) -> Result<FeatureMoments> {
        match self {
            Self::Gaussian(g) => FeatureMoments::new(g.mean.clone(), g.cov.clone()),
            Self::ReluGaussian(g) => {
                if g.mean.iter().any(|&m| m != 0.0) {
                    return Err(invalid("mean", "ReLU source needs a zero-mean Gaussian"));
                }
                relu_gaussian_moments(&g.cov)
            }
        }
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            Self::Gaussian(g) => g.sample_into(rng, out),
            Self::ReluGaussian(g) => {
                g.sample_into(rng, out);
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoadaptReport {
    pub method: Method,
    pub p: f64,
    pub dim: usize,
    pub n: usize,
    pub co_in: f64,
    pub co_out: f64,
    /// `None` when the source has no off-diagonal covariance (0/0).
    pub factor_obs: Option<f64>,
    pub factor_pred: Option<f64>,
    pub stderr: Option<f64>,
}

struct CovPair {
    input: CovAccumulator,
    output: CovAccumulator,
}

impl Merge for CovPair {
    fn merge(&mut self, other: Self) {
        self.input.merge(other.input);
        self.output.merge(other.output);
    }
}

/// Samples `n` features, noises them, and compares sample co-adaptation
/// before and after.
///
/// With `centered` the known source mean is subtracted before noising (the
/// `c = 0` regime). The stderr comes from the spread of per-chunk factors.
pub fn verify_reduction(
    source: &FeatureSource,
    method: Method,
    p: f64,
    centered: bool,
    n: usize,
    seed: u64,
) -> Result<CoadaptReport> {
    let d = source.dim();
    let op = method.op(p)?;
    let mut moments = source.moments()?;
    let mean = moments.mean.clone();
    if centered {
        moments.mean = DVector::zeros(d);
    }
    let chunk = CHUNK.min((n / 16).max(2));
    let parts = map_chunks(seed, n, chunk, |rng, count| -> Result<CovPair> {
        let mut acc = CovPair {
            input: CovAccumulator::new(d),
            output: CovAccumulator::new(d),
        };
        let mut x = vec![0.0; d];
        for _ in 0..count {
            source.sample_into(rng, &mut x);
            if centered {
                x.iter_mut().zip(mean.iter()).for_each(|(v, m)| *v -= m);
            }
            acc.input.push(&x);
            let mut y = x.clone();
            op.realize(d, rng)?.apply_in_place(&mut y);
            acc.output.push(&y);
        }
        Ok(acc)
    });
    let mut chunk_factors = Moments::new();
    let mut total: Option<CovPair> = None;
    for part in parts {
        let part = part?;
        if part.input.count() >= 2 {
            let a = coadaptation(part.input.finish()?.cov())?;
            let b = coadaptation(part.output.finish()?.cov())?;
            if a > 0.0 {
                chunk_factors.push(b / a);
            }
        }
        match total.as_mut() {
            Some(t) => t.merge(part),
            None => total = Some(part),
        }
    }
    let total = total.ok_or_else(|| invalid("n", "no samples"))?;
    let co_in = coadaptation(total.input.finish()?.cov())?;
    let co_out = coadaptation(total.output.finish()?.cov())?;
    let pred = predicted_factor(&moments, method, p)?;
    let defined = pred.is_some();
    Ok(CoadaptReport {
        method,
        p,
        dim: d,
        n,
        co_in,
        co_out,
        factor_obs: defined.then(|| co_out / co_in),
        factor_pred: pred,
        stderr: (defined && chunk_factors.count() >= 2).then(|| chunk_factors.stderr()),
    })
}

/// Monte-Carlo `E[(x̃ - x)(x̃ - x)ᵀ | x]` and its entrywise stderr.
pub fn mc_conditional_covariance(
    op: &dyn NoiseOp,
    x: &[f64],
    n: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = x.len();
    let parts = map_chunks(seed, n, CHUNK, |rng, count| -> Result<OuterMoments> {
        let mut acc = OuterMoments::new(d);
        let mut z = vec![0.0; d];
        for _ in 0..count {
            z.copy_from_slice(x);
            op.realize(d, rng as &mut dyn RngCore)?.apply_in_place(&mut z);
            z.iter_mut().zip(x).for_each(|(a, b)| *a -= b);
            acc.push(&z);
        }
        Ok(acc)
    });
    let mut acc = OuterMoments::new(d);
    for part in parts {
        acc.merge(part?);
    }
    Ok((acc.mean(), acc.stderr()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mc::stream_rng;

    #[test]
    fn coadaptation_definition() {
        assert_eq!(coadaptation(&DMatrix::identity(3, 3)).unwrap(), 0.0);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        assert!((coadaptation(&s).unwrap() - 0.5).abs() < 1e-15);
        assert!((coadaptation(&(&s * 7.0)).unwrap() - 0.5).abs() < 1e-15);
        let diag = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 0.1, 9.0]));
        assert_eq!(coadaptation(&diag).unwrap(), 0.0);
        assert!(matches!(
            coadaptation(&DMatrix::zeros(2, 2)),
            Err(Error::DegenerateCovariance { .. })
        ));
    }

    #[test]
    fn lemma1_hand_cases() {
        let r = lemma1_conditional_variance(&[1.0, 0.0], Method::Rotation, 0.5).unwrap();
        assert_eq!(r, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));
        for m in [Method::Dropout, Method::Rotation] {
            assert_eq!(
                lemma1_conditional_variance(&[0.0; 3], m, 0.7).unwrap(),
                DMatrix::zeros(3, 3)
            );
        }
        assert!(lemma1_conditional_variance(&[1.0], Method::Rotation, 0.5).is_err());
        let x = [0.3, -1.2, 2.0, 0.7];
        let lam = 0.25;
        let nx: f64 = x.iter().map(|v| v * v).sum();
        for m in [Method::Dropout, Method::Rotation] {
            let v = lemma1_conditional_variance(&x, m, 0.8).unwrap();
            assert!((v.trace() - lam * nx).abs() < 1e-12);
        }
    }

    #[test]
    fn lemma1_matches_monte_carlo_even_and_odd() {
        for (d, seed) in [(4usize, 1u64), (5, 2)] {
            let mut rng = stream_rng(seed, 99);
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            for m in [Method::Dropout, Method::Rotation] {
                let exact = lemma1_conditional_variance(&x, m, 0.8).unwrap();
                let (mc, se) = mc_conditional_covariance(m.op(0.8).unwrap().as_ref(), &x, 200_000, seed).unwrap();
                for i in 0..d {
                    for j in 0..d {
                        let tol = 4.5 * se[(i, j)] + 1e-12;
                        assert!((mc[(i, j)] - exact[(i, j)]).abs() <= tol, "{m} D={d} ({i},{j})");
                    }
                }
            }
        }
    }

    #[test]
    fn total_variance_cases() {
        let m = FeatureMoments::centered(DMatrix::identity(3, 3)).unwrap();
        assert_eq!(
            total_variance(&m, Method::Dropout, 0.5).unwrap(),
            DMatrix::identity(3, 3) * 2.0
        );
        let g = FeatureMoments::new(
            DVector::from_vec(vec![1.0, -0.5, 0.2]),
            DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]),
        )
        .unwrap();
        for method in [Method::Dropout, Method::Rotation] {
            assert_eq!(total_variance(&g, method, 1.0).unwrap(), g.cov);
        }
    }

    #[test]
    fn total_variance_matches_monte_carlo() {
        let src = GaussianSource::new(
            DVector::from_fn(8, |i, _| 0.5 - 0.1 * i as f64),
            DMatrix::from_fn(8, 8, |i, j| 0.6f64.powi((i as i32 - j as i32).abs())),
        )
        .unwrap();
        let fs = FeatureSource::Gaussian(src);
        let moments = fs.moments().unwrap();
        for method in [Method::Dropout, Method::Rotation] {
            let op = method.op(0.7).unwrap();
            let exact = total_variance(&moments, method, 0.7).unwrap();
            let parts = map_chunks(5, 200_000, CHUNK, |rng, count| {
                let mut acc = OuterMoments::new(8);
                let mut x = vec![0.0; 8];
                for _ in 0..count {
                    fs.sample_into(rng, &mut x);
                    op.realize(8, rng).unwrap().apply_in_place(&mut x);
                    let z: Vec<f64> = x.iter().zip(moments.mean.iter()).map(|(a, c)| a - c).collect();
                    acc.push(&z);
                }
                acc
            });
            let mut acc = OuterMoments::new(8);
            parts.into_iter().for_each(|p| acc.merge(p));
            let (mc, se) = (acc.mean(), acc.stderr());
            let bad = (0..64).filter(|&k| (mc[k] - exact[k]).abs() > 4.0 * se[k]).count();
            assert!(bad <= 1, "{method}: {bad} entries off");
        }
    }

    #[test]
    fn reduction_factor_values() {
        assert_eq!(reduction_factor(Method::Dropout, 0.8, 5), 0.8);
        assert!((reduction_factor(Method::Rotation, 0.8, 5) - 0.75).abs() < 1e-15);
        assert!((reduction_factor(Method::Rotation, 0.8, 1_000_000) - 0.8).abs() < 1e-6);
        let mut prev = [f64::NEG_INFINITY; 2];
        for k in 1..=20 {
            let p = k as f64 / 20.0;
            for (slot, m) in [Method::Dropout, Method::Rotation].into_iter().enumerate() {
                let f = reduction_factor(m, p, 8);
                assert!(f > prev[slot]);
                prev[slot] = f;
            }
        }
    }

    #[test]
    fn predicted_factor_agrees_with_reduction_factor_when_centered() {
        let m = FeatureSource::Gaussian(GaussianSource::equicorrelated(8, 0.5).unwrap())
            .moments()
            .unwrap();
        for method in [Method::Dropout, Method::Rotation] {
            let f = predicted_factor(&m, method, 0.8).unwrap().unwrap();
            assert!((f - reduction_factor(method, 0.8, 8)).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_dropout_factors_depend_on_mean() {
        let src = FeatureSource::ReluGaussian(GaussianSource::equicorrelated(8, 0.5).unwrap());
        let m = src.moments().unwrap();
        let c2 = 1.0 / (2.0 * std::f64::consts::PI);
        let s2 = 0.5 - c2;
        for (p, rounded) in [(0.9, 0.86), (0.7, 0.61)] {
            let lam = (1.0 - p) / p;
            let f = predicted_factor(&m, Method::Dropout, p).unwrap().unwrap();
            assert!((f - 1.0 / (1.0 + lam * (1.0 + c2 / s2))).abs() < 1e-12);
            assert!((f - rounded).abs() < 0.005, "{f}");
            let r = verify_reduction(&src, Method::Dropout, p, false, 100_000, 3).unwrap();
            assert!((r.factor_obs.unwrap() - f).abs() < 0.02);
            let rc = verify_reduction(&src, Method::Dropout, p, true, 100_000, 3).unwrap();
            assert!((rc.factor_obs.unwrap() - p).abs() < 0.02);
        }
    }

    #[test]
    fn diagonal_source_flags_undefined_factor() {
        let src = FeatureSource::Gaussian(GaussianSource::equicorrelated(4, 0.0).unwrap());
        let r = verify_reduction(&src, Method::Rotation, 0.8, true, 20_000, 1).unwrap();
        assert!(r.factor_obs.is_none() && r.factor_pred.is_none() && r.stderr.is_none());
        assert!(r.co_in < 0.1);
    }

    #[test]
    fn rotation_noise_is_inhibitory() {
        // E[cov(x̃_i, x̃_j | x)] = -λ/(D-1) cov(x_i, x_j) for rotation, 0 for dropout.
        let d = 4;
        let src = GaussianSource::equicorrelated(d, 0.5).unwrap();
        let lam = 0.25;
        for method in [Method::Dropout, Method::Rotation] {
            let op = method.op(0.8).unwrap();
            let parts = map_chunks(8, 300_000, CHUNK, |rng, count| {
                let mut acc = OuterMoments::new(d);
                let mut x = vec![0.0; d];
                for _ in 0..count {
                    src.sample_into(rng, &mut x);
                    let mut y = x.clone();
                    op.realize(d, rng).unwrap().apply_in_place(&mut y);
                    let z: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
                    acc.push(&z);
                }
                acc
            });
            let mut acc = OuterMoments::new(d);
            parts.into_iter().for_each(|p| acc.merge(p));
            let expected = match method {
                Method::Dropout => 0.0,
                Method::Rotation => -lam / 3.0 * 0.5,
            };
            let (mc, se) = (acc.mean(), acc.stderr());
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        assert!((mc[(i, j)] - expected).abs() < 5.0 * se[(i, j)], "{method} ({i},{j})");
                    }
                }
            }
        }
    }

    #[test]
    fn method_parsing() {
        assert_eq!("rotation".parse::<Method>().unwrap(), Method::Rotation);
        assert!("drop".parse::<Method>().is_err());
        assert!(noise_strength(0.0).is_err());
    }
}
