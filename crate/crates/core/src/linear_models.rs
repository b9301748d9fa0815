//! Linear regression with marginalized noise, conditioning of the two
//! penalized systems, and the angle / margin demonstrations for linear
//! classifiers.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{check_dim, invalid, Error, Result};
use crate::mc::{map_chunks, Merge, CHUNK};
use crate::regularizers::{BernoulliDropout, NoiseOp};
use crate::rotation::{rotate_in_place, RotationSampler};
use crate::stats::{Moments, MomentsVec};

/// Pivots of the Cholesky factor are compared relative to the largest one.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Design matrix `X` (N × D), targets `y`, noise strength `λ = (1 - p) / p`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionProblem {
    x: DMatrix<f64>,
    y: DVector<f64>,
    lambda: f64,
}

impl RegressionProblem {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, lambda: f64) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(invalid("x", "design matrix is empty"));
        }
        check_dim(x.nrows(), y.len())?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(invalid("lambda", format!("{lambda} must be non-negative")));
        }
        Ok(Self { x, y, lambda })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.x.clone(), self.y.clone(), lambda)
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn gram(&self) -> DMatrix<f64> {
        self.x.transpose() * &self.x
    }
}

/// `XᵀX + λ (tr(XᵀX) I - XᵀX) / (D - 1)`.
pub fn rotation_system(p: &RegressionProblem) -> Result<DMatrix<f64>> {
    let d = p.dim();
    if d < 2 {
        return Err(Error::DimensionTooSmall { dim: d });
    }
    let g = p.gram();
    let pen = DMatrix::identity(d, d) * g.trace() - &g;
    Ok(g + pen * (p.lambda / (d as f64 - 1.0)))
}

/// `XᵀX + λ diag(XᵀX)`.
pub fn dropout_system(p: &RegressionProblem) -> DMatrix<f64> {
    let g = p.gram();
    let diag = DMatrix::from_diagonal(&g.diagonal());
    g + diag * p.lambda
}

fn spd_solve(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    let chol = Cholesky::new(a).ok_or(Error::Singular { pivot: 0.0 })?;
    let pivots = chol.l_dirty().diagonal().map(|v| v * v);
    let (lo, hi) = (pivots.min(), pivots.max());
    if !(lo > PIVOT_TOLERANCE * hi) {
        return Err(Error::Singular { pivot: lo });
    }
    Ok(chol.solve(&b))
}

/// Minimizer of the rotation-marginalized squared loss.
///
/// The penalty uses the even-`D` pairing probability `1 / (D - 1)`.
pub fn solve_rotation_lr(p: &RegressionProblem) -> Result<DVector<f64>> {
    spd_solve(rotation_system(p)?, p.x.transpose() * &p.y)
}

/// Minimizer of the dropout-marginalized squared loss.
pub fn solve_dropout_lr(p: &RegressionProblem) -> Result<DVector<f64>> {
    spd_solve(dropout_system(p), p.x.transpose() * &p.y)
}

/// Spectral condition number, `+∞` when numerically singular.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(a.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if hi <= 0.0 || lo <= hi * a.nrows() as f64 * f64::EPSILON {
        return f64::INFINITY;
    }
    hi / lo
}

/// `(κ_rot, κ_drop)` of the two penalized systems.
pub fn condition_numbers(p: &RegressionProblem) -> Result<(f64, f64)> {
    if !(p.gram().trace() > 0.0) {
        return Err(invalid("x", "design matrix has zero energy"));
    }
    Ok((
        condition_number(&rotation_system(p)?),
        condition_number(&dropout_system(p)),
    ))
}

/// Monte-Carlo gradient of `E_R Σᵢ (yᵢ - wᵀ Rᵢ xᵢ)²` at `w`, with a fresh
/// rotation per row and per draw. Returns mean and stderr per coordinate.
pub fn mc_marginalized_gradient(
    p: &RegressionProblem,
    w: &DVector<f64>,
    sampler: &RotationSampler,
    draws: usize,
    seed: u64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let d = p.dim();
    check_dim(d, w.len())?;
    let rows: Vec<Vec<f64>> = p.x.row_iter().map(|r| r.iter().copied().collect()).collect();
    let parts = map_chunks(seed, draws, CHUNK / 8, |rng, count| -> Result<MomentsVec> {
        let mut acc = MomentsVec::new(d);
        let mut grad = vec![0.0; d];
        let mut z = vec![0.0; d];
        for _ in 0..count {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (xi, yi) in rows.iter().zip(p.y.iter()) {
                let r = sampler.sample(d, rng)?;
                z.copy_from_slice(xi);
                rotate_in_place(r.pairing(), r.tangent(), &mut z);
                let resid = yi - w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
                grad.iter_mut().zip(&z).for_each(|(g, zj)| *g -= 2.0 * resid * zj);
            }
            acc.push(&grad);
        }
        Ok(acc)
    });
    let mut total = MomentsVec::new(d);
    for part in parts {
        total.merge(part?);
    }
    Ok((DVector::from_vec(total.means()), DVector::from_vec(total.stderrs())))
}

/// Mean `cos²` of the angle between a nonnegative vector and its dropout
/// perturbation, with stderr.
pub fn dropout_rotation_angle(dim: usize, p: f64, n: usize, seed: u64) -> Result<(f64, f64)> {
    if dim < 2 {
        return Err(Error::DimensionTooSmall { dim });
    }
    let op = BernoulliDropout::new(p)?;
    let parts = map_chunks(seed, n, CHUNK / 8, |rng, count| -> Result<Moments> {
        let mut m = Moments::new();
        for _ in 0..count {
            let x: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal).abs()).collect();
            let y = op.train(&x, rng as &mut dyn RngCore)?;
            let (xy, xx, yy) = x
                .iter()
                .zip(&y)
                .fold((0.0, 0.0, 0.0), |(a, b, c), (u, v)| (a + u * v, b + u * u, c + v * v));
            m.push(if yy == 0.0 { 0.0 } else { xy * xy / (xx * yy) });
        }
        Ok(m)
    });
    let mut total = Moments::new();
    for part in parts {
        total.merge(part?);
    }
    Ok((total.mean(), total.stderr()))
}

fn argmax(w: &DMatrix<f64>, x: &[f64]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, row) in w.row_iter().enumerate() {
        let s: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
        if s > best.1 {
            best = (k, s);
        }
    }
    best.0
}

fn normalize_rows(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if w.nrows() < 2 {
        return Err(invalid("weights", "need at least two classes"));
    }
    let mut out = w.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n == 0.0 {
            return Err(invalid("weights", "zero weight row"));
        }
        row /= n;
    }
    Ok(out)
}

/// Probability that rotating `x` changes the predicted class, with stderr.
/// Weight rows are normalized to unit length first.
pub fn flip_rate(
    weights: &DMatrix<f64>,
    x: &[f64],
    sampler: &RotationSampler,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let w = normalize_rows(weights)?;
    check_dim(w.ncols(), x.len())?;
    let clean = argmax(&w, x);
    let parts = map_chunks(seed, n, CHUNK, |rng, count| -> Result<Moments> {
        let mut m = Moments::new();
        let mut z = vec![0.0; x.len()];
        for _ in 0..count {
            let r = sampler.sample(x.len(), rng)?;
            z.copy_from_slice(x);
            rotate_in_place(r.pairing(), r.tangent(), &mut z);
            m.push(if argmax(&w, &z) == clean { 0.0 } else { 1.0 });
        }
        Ok(m)
    });
    let mut total = Moments::new();
    for part in parts {
        total.merge(part?);
    }
    Ok((total.mean(), total.stderr()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MarginPoint {
    pub margin: f64,
    pub flip_rate: f64,
    pub stderr: f64,
}

/// Number of margins on the demo grid.
pub const MARGIN_GRID: usize = 20;

/// Flip rate along the great circle through the first two (normalized)
/// weight rows. The margin is the angle from their bisector toward row 0,
/// on an even grid over `[0, 1.5 · scale]` where `scale` is the sampler's
/// typical angle.
pub fn logistic_margin_demo(
    weights: &DMatrix<f64>,
    sampler: &RotationSampler,
    n: usize,
    seed: u64,
) -> Result<Vec<MarginPoint>> {
    let w = normalize_rows(weights)?;
    let (w0, w1) = (w.row(0).transpose(), w.row(1).transpose());
    let b = &w0 + &w1;
    let u = &w0 - &w1;
    if b.norm() == 0.0 || u.norm() == 0.0 {
        return Err(invalid("weights", "first two rows are parallel"));
    }
    let (b, u) = (b.normalize(), u.normalize());
    let top = 1.5 * sampler.angle.angle_scale();
    (0..MARGIN_GRID)
        .map(|k| {
            let margin = top * k as f64 / (MARGIN_GRID - 1) as f64;
            let x = &b * margin.cos() + &u * margin.sin();
            let (flip_rate, stderr) = flip_rate(&w, x.as_slice(), sampler, n, seed.wrapping_add(k as u64))?;
            Ok(MarginPoint {
                margin,
                flip_rate,
                stderr,
            })
        })
        .collect()
}

/// A random regression problem with Gaussian design and noisy linear targets.
pub fn random_problem<R: Rng + ?Sized>(n: usize, d: usize, lambda: f64, rng: &mut R) -> Result<RegressionProblem> {
    let x = DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal));
    let w = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
    let noise = DVector::from_fn(n, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
    let y = &x * w + noise;
    RegressionProblem::new(x, y, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mc::stream_rng;
    use crate::rotation::AngleDistribution;

    fn ols(p: &RegressionProblem) -> DVector<f64> {
        p.gram().lu().solve(&(p.x().transpose() * p.y())).unwrap()
    }

    #[test]
    fn identity_design_hand_case() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let p = RegressionProblem::new(DMatrix::identity(4, 4), y.clone(), 1.0).unwrap();
        assert_eq!(rotation_system(&p).unwrap(), DMatrix::identity(4, 4) * 2.0);
        let half = &y * 0.5;
        assert!((solve_rotation_lr(&p).unwrap() - &half).amax() < 1e-14);
        assert!((solve_dropout_lr(&p).unwrap() - &half).amax() < 1e-14);
        assert_eq!(condition_numbers(&p).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn lambda_zero_is_ols() {
        let mut rng = stream_rng(1, 0);
        let p = random_problem(30, 5, 0.0, &mut rng).unwrap();
        let w = ols(&p);
        assert!((solve_rotation_lr(&p).unwrap() - &w).amax() < 1e-10);
        assert!((solve_dropout_lr(&p).unwrap() - &w).amax() < 1e-10);
    }

    #[test]
    fn ridge_identity_at_lambda_one() {
        let mut rng = stream_rng(2, 0);
        for d in 3..10 {
            let p = random_problem(20, d, 1.0, &mut rng).unwrap();
            let g = p.gram();
            let df = d as f64;
            let ridge = (&g + DMatrix::identity(d, d) * (g.trace() / (df - 2.0))) * ((df - 2.0) / (df - 1.0));
            assert!((rotation_system(&p).unwrap() - ridge).amax() < 1e-10 * g.amax());
        }
    }

    #[test]
    fn zero_column_breaks_dropout_only() {
        let mut rng = stream_rng(3, 0);
        let mut p = random_problem(20, 4, 1.0, &mut rng).unwrap();
        p.x.column_mut(2).fill(0.0);
        assert!(matches!(solve_dropout_lr(&p), Err(Error::Singular { .. })));
        assert!(solve_rotation_lr(&p).is_ok());
        let (kr, kd) = condition_numbers(&p).unwrap();
        assert!(kr <= 3.0 + 1e-9);
        assert_eq!(kd, f64::INFINITY);
        let ls = p.with_lambda(0.0).unwrap();
        assert!(solve_rotation_lr(&ls).is_err());
    }

    #[test]
    fn tiny_column_conditioning() {
        let mut rng = stream_rng(4, 0);
        let mut p = random_problem(40, 6, 1.0, &mut rng).unwrap();
        p.x.column_mut(5).scale_mut(1e-8);
        let (kr, kd) = condition_numbers(&p).unwrap();
        assert!(kr <= 5.0 + 1e-9, "{kr}");
        assert!(kd > 1e6, "{kd}");
    }

    #[test]
    fn rotation_condition_bound_random_and_rank_deficient() {
        let mut rng = stream_rng(5, 0);
        for t in 0..50 {
            let d = 3 + t % 14;
            let n = if t % 3 == 0 { d / 2 + 1 } else { 2 * d };
            let p = random_problem(n, d, 1.0, &mut rng).unwrap();
            let (kr, _) = condition_numbers(&p).unwrap();
            assert!(kr <= d as f64 - 1.0 + 1e-9, "D={d} N={n}: {kr}");
        }
    }

    #[test]
    fn closed_form_zeroes_marginalized_gradient() {
        let mut rng = stream_rng(6, 0);
        let p = random_problem(64, 6, 0.25, &mut rng).unwrap();
        let w = solve_rotation_lr(&p).unwrap();
        let sampler = RotationSampler::new(AngleDistribution::gaussian_tangent(0.5).unwrap());
        let (g, se) = mc_marginalized_gradient(&p, &w, &sampler, 20_000, 7).unwrap();
        for i in 0..6 {
            assert!(g[i].abs() < 4.0 * se[i], "coord {i}: {} vs {}", g[i], se[i]);
        }
        // And it is not zero at the least-squares solution.
        let (g0, se0) = mc_marginalized_gradient(&p, &ols(&p), &sampler, 20_000, 7).unwrap();
        assert!((0..6).any(|i| g0[i].abs() > 6.0 * se0[i]));
    }

    #[test]
    fn dropout_angle_concentrates_at_keep_rate() {
        let (c, _) = dropout_rotation_angle(64, 1.0, 100, 1).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
        let (c, se) = dropout_rotation_angle(1024, 0.5, 2000, 2).unwrap();
        assert!((c - 0.5).abs() < 0.02, "{c} ± {se}");
    }

    #[test]
    fn margin_demo_behaviour() {
        let mut rng = stream_rng(7, 0);
        let w = DMatrix::from_fn(2, 16, |_, _| rng.sample::<f64, _>(StandardNormal));
        let zero = RotationSampler::new(AngleDistribution::fixed(0.0).unwrap());
        let flat = logistic_margin_demo(&w, &zero, 500, 1).unwrap();
        assert!(flat.iter().all(|m| m.flip_rate == 0.0));
        let s = RotationSampler::new(AngleDistribution::gaussian_tangent(0.5).unwrap());
        let curve = logistic_margin_demo(&w, &s, 20_000, 2).unwrap();
        assert_eq!(curve.len(), MARGIN_GRID);
        assert!((curve[0].flip_rate - 0.5).abs() < 0.02, "{}", curve[0].flip_rate);
        for pair in curve.windows(2) {
            let slack = 3.0 * (pair[0].stderr.hypot(pair[1].stderr));
            assert!(pair[1].flip_rate <= pair[0].flip_rate + slack);
        }
        assert!(curve.last().unwrap().flip_rate < 0.2);
        assert!(logistic_margin_demo(&w.rows(0, 1).into_owned(), &s, 10, 1).is_err());
    }
}
