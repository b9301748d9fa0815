//! Mergeable moment accumulators and covariance summaries.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, invalid, Result};
use crate::mc::Merge;

/// Running mean and sum of squared deviations of a scalar (Welford, merged with
/// Chan's pairwise update).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; NaN below two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            f64::NAN
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn stderr(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = Moments::new();
        iter.into_iter().for_each(|x| m.push(x));
        m
    }
}

impl Merge for Moments {
    fn merge(&mut self, other: Self) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64) * (other.n as f64) / n as f64;
        self.mean = mean;
        self.n = n;
    }
}

/// Elementwise [`Moments`] over a fixed-length vector of statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentsVec {
    items: Vec<Moments>,
}

impl MomentsVec {
    pub fn new(len: usize) -> Self {
        Self {
            items: vec![Moments::new(); len],
        }
    }

    pub fn push(&mut self, xs: &[f64]) {
        assert_eq!(xs.len(), self.items.len());
        for (m, &x) in self.items.iter_mut().zip(xs) {
            m.push(x);
        }
    }

    pub fn items(&self) -> &[Moments] {
        &self.items
    }

    pub fn means(&self) -> Vec<f64> {
        self.items.iter().map(Moments::mean).collect()
    }

    pub fn stderrs(&self) -> Vec<f64> {
        self.items.iter().map(Moments::stderr).collect()
    }
}

impl Merge for MomentsVec {
    fn merge(&mut self, other: Self) {
        for (a, b) in self.items.iter_mut().zip(other.items) {
            a.merge(b);
        }
    }
}

/// Mean and stderr of every entry of `z zᵀ` for a stream of vectors `z`.
/// Used to estimate second-moment matrices whose mean is known a priori
/// (e.g. conditional noise covariance, where `E[x̃ - x | x] = 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct OuterMoments {
    dim: usize,
    entries: MomentsVec,
}

impl OuterMoments {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: MomentsVec::new(dim * dim),
        }
    }

    pub fn push(&mut self, z: &[f64]) {
        let d = self.dim;
        let mut buf = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                buf[i * d + j] = z[i] * z[j];
            }
        }
        self.entries.push(&buf);
    }

    pub fn mean(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.entries.means())
    }

    pub fn stderr(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.entries.stderrs())
    }
}

impl Merge for OuterMoments {
    fn merge(&mut self, other: Self) {
        self.entries.merge(other.entries);
    }
}

/// Streaming sample mean and co-moment matrix with pairwise merge.
#[derive(Clone, Debug, PartialEq)]
pub struct CovAccumulator {
    n: u64,
    mean: DVector<f64>,
    comoment: DMatrix<f64>,
}

impl CovAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: DVector::zeros(dim),
            comoment: DMatrix::zeros(dim, dim),
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        let d = self.mean.len();
        debug_assert_eq!(x.len(), d);
        self.n += 1;
        let n = self.n as f64;
        let delta: Vec<f64> = x.iter().zip(self.mean.iter()).map(|(a, m)| a - m).collect();
        for i in 0..d {
            self.mean[i] += delta[i] / n;
        }
        for j in 0..d {
            let after_j = x[j] - self.mean[j];
            for i in 0..d {
                self.comoment[(i, j)] += delta[i] * after_j;
            }
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    /// Unbiased (n - 1) covariance summary.
    pub fn finish(&self) -> Result<CovStats> {
        if self.n < 2 {
            return Err(invalid("n", "covariance needs at least two samples"));
        }
        let mut cov = &self.comoment / (self.n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(CovStats {
            n: self.n as usize,
            moments: FeatureMoments {
                mean: self.mean.clone(),
                cov,
            },
        })
    }
}

impl Merge for CovAccumulator {
    fn merge(&mut self, other: Self) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other;
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        self.comoment += other.comoment + (&delta * delta.transpose()) * (na * nb / n);
        self.mean += delta * (nb / n);
        self.n += other.n;
    }
}

/// Population first and second moments of a feature vector: `E[x] = c`,
/// `Var[x] = Σ`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureMoments {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim(mean.len(), cov.nrows())?;
        check_dim(mean.len(), cov.ncols())?;
        Ok(Self { mean, cov })
    }

    pub fn centered(cov: DMatrix<f64>) -> Result<Self> {
        let d = cov.nrows();
        Self::new(DVector::zeros(d), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `E[x xᵀ] = Σ + c cᵀ`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        &self.cov + &self.mean * self.mean.transpose()
    }
}

/// Sample covariance summary (`n ≥ 2`, unbiased estimator).
#[derive(Clone, Debug, PartialEq)]
pub struct CovStats {
    n: usize,
    moments: FeatureMoments,
}

impl CovStats {
    /// Builds the summary of the rows of `samples` (N × D).
    pub fn from_rows(samples: &DMatrix<f64>) -> Result<Self> {
        let mut acc = CovAccumulator::new(samples.ncols());
        let mut row = vec![0.0; samples.ncols()];
        for r in samples.row_iter() {
            row.iter_mut().zip(r.iter()).for_each(|(d, s)| *d = *s);
            acc.push(&row);
        }
        acc.finish()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.moments.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.moments.cov
    }

    pub fn moments(&self) -> &FeatureMoments {
        &self.moments
    }
}

/// Exact moments of `ReLU(z)` for `z ~ N(0, cov)` (arc-cosine kernel of degree 1).
pub fn relu_gaussian_moments(cov: &DMatrix<f64>) -> Result<FeatureMoments> {
    let d = cov.nrows();
    check_dim(d, cov.ncols())?;
    let sd: Vec<f64> = (0..d).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    let two_pi = 2.0 * std::f64::consts::PI;
    let mean = DVector::from_fn(d, |i, _| sd[i] / two_pi.sqrt());
    let second = DMatrix::from_fn(d, d, |i, j| {
        let s = sd[i] * sd[j];
        if s == 0.0 {
            return 0.0;
        }
        let rho = (cov[(i, j)] / s).clamp(-1.0, 1.0);
        let phi = rho.acos();
        s / two_pi * (phi.sin() + (std::f64::consts::PI - phi) * rho)
    });
    let cov = second - &mean * mean.transpose();
    FeatureMoments::new(mean, cov)
}
