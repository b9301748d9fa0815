use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use rotout::bn_lab::{
    affine_fit, fit_poly_correction, grid, mc_cross_norm_curve, mc_nonlinearity_curve, noise_budget, observation_trial,
    sphere_rows, variance_shift, wishart_covariance, NonlinearityCurve, Placement, SourceDistribution,
};
use rotout::linear_models::{condition_numbers, dropout_rotation_angle, logistic_margin_demo, RegressionProblem};
use rotout::mc::{derive_seed, execution, map_chunks, set_execution, stream_rng, Execution, Merge, CHUNK};
use rotout::nn::{sign_test_p_value, train_and_report, Dataset};
use rotout::noise_lab::{
    lemma1_conditional_variance, mc_conditional_covariance, verify_reduction, FeatureSource, GaussianSource, Method,
};
use rotout::regularizers::{NoiseKind, NoiseOpSpec};
use rotout::rotation::{AngleDistribution, RotationSampler};
use rotout::stats::{relu_gaussian_moments, Moments, MomentsVec};

use crate::config::*;
use crate::error::{require, CliError, CliResult};
use crate::output::{Manifest, RunDir, VERSIONS};
use crate::plot::{line_chart, Series};

pub struct Context {
    pub seed: u64,
    pub plot: bool,
    pub run: RunDir,
}

impl Context {
    fn chart(&mut self, name: &str, title: &str, x: &str, y: &str, series: &[Series]) -> CliResult<()> {
        if self.plot {
            let path = self.run.artifact(name);
            line_chart(&path, title, x, y, series)?;
        }
        Ok(())
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(path) => load_config(path)?,
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let sequential = cli.sequential || file.sequential.unwrap_or(false);
    set_execution(if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    });
    let name = cli.command.name();
    let root = out_root(cli.out_dir.clone(), file.out_dir.clone());
    let mut ctx = Context {
        seed,
        plot: cli.plot || file.plot.unwrap_or(false),
        run: RunDir::create(&root, name)?,
    };
    let started = SystemTime::now();
    let clock = Instant::now();
    let config_file = cli.config.as_deref();

    macro_rules! dispatch {
        ($cfg:expr, $experiment:ident) => {{
            let cfg = $cfg?;
            let outcome = $experiment(&mut ctx, &cfg);
            let manifest = Manifest {
                command: name,
                seed,
                config_file,
                config: &cfg,
                execution: match execution() {
                    Execution::Parallel => "parallel",
                    Execution::Sequential => "sequential",
                },
                versions: VERSIONS,
                outputs: ctx.run.files(),
                started_unix_seconds: started.duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64()),
                elapsed_seconds: clock.elapsed().as_secs_f64(),
            };
            ctx.run.write_json("manifest.json", &manifest)?;
            outcome
        }};
    }

    match &cli.command {
        Command::VerifyRotation(a) => dispatch!(overlay(name, file.verify_rotation, a), verify_rotation),
        Command::Coadapt(a) => dispatch!(overlay(name, file.coadapt, a), coadapt),
        Command::Linreg(a) => dispatch!(overlay(name, file.linreg, a), linreg),
        Command::AngleDemo(a) => dispatch!(overlay(name, file.angle_demo, a), angle_demo),
        Command::VarShift(a) => dispatch!(overlay(name, file.var_shift, a), var_shift),
        Command::BnCurve(a) => dispatch!(overlay(name, file.bn_curve, a), bn_curve),
        Command::BnPoly(a) => dispatch!(overlay(name, file.bn_poly, a), bn_poly),
        Command::CnCheck(a) => dispatch!(overlay(name, file.cn_check, a), cn_check),
        Command::NoiseBudget(a) => dispatch!(overlay(name, file.noise_budget, a), noise_budget_cmd),
        Command::TrainDemo(a) => dispatch!(resolve_train_demo(file.train_demo, a), train_demo),
    }?;
    println!("wrote {}", ctx.run.dir().display());
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_keep_rate(p: f64, key: &str) -> CliResult<()> {
    require(p > 0.0 && p <= 1.0, key, "keep rate must lie in (0, 1]")
}

fn check_grid(lo: f64, hi: f64, step: f64, section: &str) -> CliResult<Vec<f64>> {
    require(
        lo.is_finite() && hi.is_finite() && lo < hi,
        &format!("{section}.hi"),
        "need finite lo < hi",
    )?;
    require(
        step > 0.0 && step <= hi - lo,
        &format!("{section}.step"),
        "must be positive and at most hi - lo",
    )?;
    Ok(grid(lo, hi, step))
}

#[derive(Serialize)]
struct InvariantRow {
    invariant: &'static str,
    dim: usize,
    sigma: f64,
    samples: usize,
    statistic: f64,
    tolerance: f64,
    passed: bool,
}

fn verify_rotation(ctx: &mut Context, c: &VerifyRotationConfig) -> CliResult<()> {
    require(c.dim >= 2, "verify-rotation.dim", "must be at least 2")?;
    require(
        c.sigma.is_finite() && c.sigma > 0.0,
        "verify-rotation.sigma",
        "must be positive",
    )?;
    require(c.samples.0 >= 2, "verify-rotation.samples", "need at least 2")?;
    let (d, n) = (c.dim, c.samples.0);
    let angle = AngleDistribution::gaussian_tangent(c.sigma)?;
    let sampler = RotationSampler::new(angle);
    let mut rng = stream_rng(ctx.seed, 0);
    let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();

    // Exact per-realization identities. For odd D the fixed coordinate is
    // zeroed for the angle and norm checks, which concern the rotated part.
    let (mut angle_err, mut norm_err, mut adjoint_err, mut pair_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n.min(10_000) {
        let r = sampler.sample(d, &mut rng)?;
        let t = r.tangent();
        let mut xs = x.clone();
        if let Some(f) = r.pairing().fixed() {
            xs[f] = 0.0;
        }
        let y = r.apply(&xs)?;
        let (nx, ny) = (dot(&xs, &xs), dot(&y, &y));
        angle_err = angle_err.max((dot(&xs, &y) / (nx * ny).sqrt() - 1.0 / (1.0 + t * t).sqrt()).abs());
        norm_err = norm_err.max((ny - nx * (1.0 + t * t)).abs() / (nx * (1.0 + t * t)));

        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let full = r.apply(&x)?;
        let lhs = dot(&g, &full);
        let rhs = dot(&r.apply_transpose(&g)?, &x);
        adjoint_err = adjoint_err.max((lhs - rhs).abs() / (1.0 + lhs.abs()));
        for &(a, b) in r.pairing().pairs() {
            pair_err = pair_err.max((full[a] - (x[a] + x[b] * t)).abs());
            pair_err = pair_err.max((full[b] - (x[b] - x[a] * t)).abs());
        }
        if let Some(f) = r.pairing().fixed() {
            pair_err = pair_err.max((full[f] - x[f]).abs());
        }
    }

    let parts = map_chunks(
        derive_seed(ctx.seed, 1),
        n,
        CHUNK,
        |rng, count| -> rotout::Result<(MomentsVec, Moments)> {
            let mut mean = MomentsVec::new(d);
            let mut tan2 = Moments::new();
            for _ in 0..count {
                let r = sampler.sample(d, rng)?;
                mean.push(&r.apply(&x)?);
                tan2.push(r.tangent().powi(2));
            }
            Ok((mean, tan2))
        },
    );
    let (mut mean, mut tan2) = (MomentsVec::new(d), Moments::new());
    for part in parts {
        let (m, t) = part?;
        mean.merge(m);
        tan2.merge(t);
    }
    let mean_z = (0..d)
        .map(|i| (mean.means()[i] - x[i]).abs() / mean.stderrs()[i])
        .fold(0.0, f64::max);
    let tan2_z = (tan2.mean() - c.sigma * c.sigma).abs() / tan2.stderr();

    let op = NoiseOpSpec::dense(NoiseKind::Rotation { angle }).build()?;
    let (cov, se) = mc_conditional_covariance(op.as_ref(), &x, n, derive_seed(ctx.seed, 2))?;
    let exact = lemma1_conditional_variance(&x, Method::Rotation, angle.keep_rate())?;
    let mut cov_z = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            let diff = (cov[(i, j)] - exact[(i, j)]).abs();
            if diff > 0.0 {
                cov_z = cov_z.max(diff / se[(i, j)]);
            }
        }
    }

    let checks = [
        ("angle", angle_err, 1e-10),
        ("norm-scaling", norm_err, 1e-12),
        ("adjoint", adjoint_err, 1e-12),
        ("pair-law", pair_err, 1e-12),
        ("zero-mean-z", mean_z, 4.0),
        ("conditional-covariance-z", cov_z, 4.0),
        ("tangent-second-moment-z", tan2_z, 4.0),
    ];
    let rows: Vec<InvariantRow> = checks
        .iter()
        .map(|&(invariant, statistic, tolerance)| InvariantRow {
            invariant,
            dim: d,
            sigma: c.sigma,
            samples: n,
            statistic,
            tolerance,
            passed: statistic <= tolerance,
        })
        .collect();
    ctx.run.write_csv("invariants.csv", &rows)?;
    for r in &rows {
        println!(
            "{:<26} {:>12.3e}  (tolerance {:.0e})  {}",
            r.invariant,
            r.statistic,
            r.tolerance,
            if r.passed { "ok" } else { "FAILED" }
        );
    }
    match rows.iter().find(|r| !r.passed) {
        Some(r) => Err(CliError::Numerical(format!(
            "invariant `{}` failed: {:e} > {:e}",
            r.invariant, r.statistic, r.tolerance
        ))),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct CoadaptRow {
    method: String,
    p: f64,
    #[serde(rename = "D")]
    dim: usize,
    n: usize,
    co_in: f64,
    co_out: f64,
    factor_obs: Option<f64>,
    factor_pred: Option<f64>,
    stderr: Option<f64>,
}

fn coadapt(ctx: &mut Context, c: &CoadaptConfig) -> CliResult<()> {
    require(c.dim >= 2, "coadapt.dim", "must be at least 2")?;
    require(!c.methods.is_empty(), "coadapt.methods", "must not be empty")?;
    require(!c.p.is_empty(), "coadapt.p", "must not be empty")?;
    for &p in &c.p {
        check_keep_rate(p, "coadapt.p")?;
    }
    let lo = -1.0 / (c.dim as f64 - 1.0);
    require(c.rho > lo && c.rho < 1.0, "coadapt.rho", "must lie in (-1/(dim-1), 1)")?;
    let gauss = GaussianSource::equicorrelated(c.dim, c.rho)?;
    let source = match c.source {
        FeatureKind::Gaussian => FeatureSource::Gaussian(gauss),
        FeatureKind::Relu => FeatureSource::ReluGaussian(gauss),
    };
    let mut rows = Vec::new();
    let mut k = 0;
    for &method in &c.methods {
        for &p in &c.p {
            let r = verify_reduction(&source, method, p, c.centered, c.samples.0, derive_seed(ctx.seed, k))?;
            k += 1;
            println!(
                "{method:<8} p={p:<5} factor observed {} predicted {}",
                r.factor_obs.map_or("undefined".into(), |f| format!("{f:.4}")),
                r.factor_pred.map_or("undefined".into(), |f| format!("{f:.4}"))
            );
            rows.push(CoadaptRow {
                method: method.to_string(),
                p,
                dim: r.dim,
                n: r.n,
                co_in: r.co_in,
                co_out: r.co_out,
                factor_obs: r.factor_obs,
                factor_pred: r.factor_pred,
                stderr: r.stderr,
            });
        }
    }
    ctx.run.write_csv("coadapt.csv", &rows)?;
    let mut series = Vec::new();
    for &method in &c.methods {
        let mine = || rows.iter().filter(move |r| r.method == method.to_string());
        series.push(Series::new(
            format!("{method} observed"),
            mine().filter_map(|r| Some((r.p, r.factor_obs?))).collect(),
        ));
        series.push(Series::new(
            format!("{method} predicted"),
            mine().filter_map(|r| Some((r.p, r.factor_pred?))).collect(),
        ));
    }
    ctx.chart(
        "coadapt.svg",
        "Co-adaptation reduction",
        "keep rate p",
        "co(out) / co(in)",
        &series,
    )
}

#[derive(Serialize)]
struct LinregRow {
    lambda: f64,
    method: &'static str,
    #[serde(rename = "D")]
    dim: usize,
    #[serde(rename = "N")]
    rows: usize,
    kappa: f64,
}

fn linreg(ctx: &mut Context, c: &LinregConfig) -> CliResult<()> {
    require(c.dim >= 2, "linreg.dim", "must be at least 2")?;
    require(c.rows >= 1, "linreg.rows", "must be positive")?;
    require(c.problems >= 1, "linreg.problems", "must be positive")?;
    require(
        c.lambda.is_finite() && c.lambda >= 0.0,
        "linreg.lambda",
        "must be non-negative",
    )?;
    let mut rng = stream_rng(ctx.seed, 0);
    let mut rows = Vec::new();
    let (mut max_rot, mut infinite_drop) = (0.0f64, 0);
    for _ in 0..c.problems {
        let mut x = DMatrix::from_fn(c.rows, c.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        if c.degenerate_column {
            x.column_mut(c.dim - 1).fill(0.0);
        }
        let y = DVector::from_fn(c.rows, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (kr, kd) = condition_numbers(&RegressionProblem::new(x, y, c.lambda)?)?;
        max_rot = max_rot.max(kr);
        infinite_drop += usize::from(kd.is_infinite());
        for (method, kappa) in [("rotation", kr), ("dropout", kd)] {
            rows.push(LinregRow {
                lambda: c.lambda,
                method,
                dim: c.dim,
                rows: c.rows,
                kappa,
            });
        }
    }
    ctx.run.write_csv("linreg.csv", &rows)?;
    let bound = c.dim as f64 - 1.0;
    println!(
        "largest kappa_rot {max_rot:.4} (D-1 = {bound}); kappa_drop infinite in {infinite_drop}/{} problems",
        c.problems
    );
    if c.lambda == 1.0 && max_rot > bound * (1.0 + 1e-9) {
        return Err(CliError::Numerical(format!(
            "kappa_rot {max_rot} exceeds D-1 = {bound} at lambda = 1"
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct AngleRow {
    #[serde(rename = "D")]
    dim: usize,
    p: f64,
    cos2_mean: f64,
    stderr: f64,
}

#[derive(Serialize)]
struct MarginRow {
    margin: f64,
    flip_rate: f64,
    stderr: f64,
}

fn angle_demo(ctx: &mut Context, c: &AngleDemoConfig) -> CliResult<()> {
    require(c.dim >= 1, "angle-demo.dim", "must be positive")?;
    require(c.classes >= 2, "angle-demo.classes", "need at least 2")?;
    require(c.margin_dim >= 2, "angle-demo.margin_dim", "must be at least 2")?;
    check_keep_rate(c.keep_rate, "angle-demo.keep_rate")?;
    require(
        c.keep_rate < 1.0,
        "angle-demo.keep_rate",
        "must be below 1 for a nonzero rotation",
    )?;
    let mut rows = Vec::new();
    for (k, &p) in c.p.iter().enumerate() {
        check_keep_rate(p, "angle-demo.p")?;
        let (cos2_mean, stderr) = dropout_rotation_angle(c.dim, p, c.samples.0, derive_seed(ctx.seed, k as u64))?;
        println!("dropout p={p}: mean cos^2 {cos2_mean:.4} +/- {stderr:.4}");
        rows.push(AngleRow {
            dim: c.dim,
            p,
            cos2_mean,
            stderr,
        });
    }
    ctx.run.write_csv("angle.csv", &rows)?;

    let mut rng = stream_rng(ctx.seed, 1);
    let weights = DMatrix::from_fn(c.classes, c.margin_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let sampler = RotationSampler::new(AngleDistribution::gaussian_for_keep_rate(c.keep_rate)?);
    let points = logistic_margin_demo(&weights, &sampler, c.margin_samples.0, derive_seed(ctx.seed, 1 << 20))?;
    let margin: Vec<MarginRow> = points
        .iter()
        .map(|m| MarginRow {
            margin: m.margin,
            flip_rate: m.flip_rate,
            stderr: m.stderr,
        })
        .collect();
    ctx.run.write_csv("margin.csv", &margin)?;
    let curve = margin.iter().map(|m| (m.margin, m.flip_rate)).collect();
    ctx.chart(
        "margin.svg",
        "Prediction flips under rotation",
        "angular margin (rad)",
        "flip rate",
        &[Series::new("rotation", curve)],
    )
}

#[derive(Serialize)]
struct ShiftRow {
    placement: Placement,
    centered: bool,
    p: f64,
    #[serde(rename = "D")]
    dim: usize,
    unit: usize,
    var_train: f64,
    var_test: f64,
    ratio: f64,
}

#[derive(Serialize)]
struct ObservationRow {
    trial: usize,
    var_ratio_a: f64,
    var_ratio_b: f64,
    max_ratio_a: f64,
    max_ratio_b: f64,
    holds: bool,
}

fn var_shift(ctx: &mut Context, c: &VarShiftConfig) -> CliResult<()> {
    check_keep_rate(c.p, "var-shift.p")?;
    require(c.dim >= 2, "var-shift.dim", "must be at least 2")?;
    require(c.units >= 1, "var-shift.units", "must be positive")?;
    require(c.trials >= 1, "var-shift.trials", "must be positive")?;
    let mut obs = Vec::with_capacity(c.trials);
    for t in 0..c.trials {
        let trial = observation_trial(c.dim, c.units, c.p, derive_seed(ctx.seed, t as u64))?;
        obs.push(ObservationRow {
            trial: t,
            var_ratio_a: trial.var_ratio_a,
            var_ratio_b: trial.var_ratio_b,
            max_ratio_a: trial.max_ratio_a,
            max_ratio_b: trial.max_ratio_b,
            holds: trial.holds(),
        });
    }
    ctx.run.write_csv("observation.csv", &obs)?;
    let held = obs.iter().filter(|o| o.holds).count();
    println!(
        "dropout-b has the smaller ratio spread and the smaller max ratio in {held}/{} trials",
        c.trials
    );

    // Per-unit detail for the features and weights of trial 0.
    let mut rng = stream_rng(derive_seed(ctx.seed, 0), 0);
    let features = relu_gaussian_moments(&wishart_covariance(c.dim, &mut rng))?;
    let weights = sphere_rows(c.units, c.dim, &mut rng);
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for placement in [Placement::DropoutA, Placement::DropoutB] {
        let report = variance_shift(placement, c.centered, c.p, &features, &weights)?;
        let mut sorted: Vec<f64> = report.units.iter().map(|u| u.ratio).collect();
        sorted.sort_by(f64::total_cmp);
        series.push(Series::new(
            format!("{placement:?}"),
            sorted.into_iter().enumerate().map(|(k, r)| (k as f64, r)).collect(),
        ));
        rows.extend(report.units.iter().enumerate().map(|(unit, u)| ShiftRow {
            placement,
            centered: c.centered,
            p: c.p,
            dim: c.dim,
            unit,
            var_train: u.var_train,
            var_test: u.var_test,
            ratio: u.ratio,
        }));
    }
    ctx.run.write_csv("shift.csv", &rows)?;
    ctx.chart(
        "shift.svg",
        "Variance shift per unit (trial 0)",
        "unit rank",
        "train/test variance ratio",
        &series,
    )
}

#[derive(Serialize)]
struct CurveRow {
    dist: SourceDistribution,
    #[serde(rename = "B")]
    batch: usize,
    x_test: f64,
    f_expect: f64,
    f_var: f64,
    stderr: f64,
}

fn curve_rows(curve: &NonlinearityCurve) -> impl Iterator<Item = CurveRow> + '_ {
    curve.points.iter().map(|p| CurveRow {
        dist: curve.dist,
        batch: curve.batch,
        x_test: p.x_test,
        f_expect: p.f_expect,
        f_var: p.f_var,
        stderr: p.stderr,
    })
}

fn curve_series(label: String, curve: &NonlinearityCurve) -> Series {
    Series::new(label, curve.points.iter().map(|p| (p.x_test, p.f_expect)).collect())
}

fn identity_series(xs: &[f64]) -> Series {
    Series::new("identity", xs.iter().map(|&x| (x, x)).collect())
}

fn bn_curve(ctx: &mut Context, c: &BnCurveConfig) -> CliResult<()> {
    let xs = check_grid(c.lo, c.hi, c.step, "bn-curve")?;
    require(!c.dist.is_empty(), "bn-curve.dist", "must not be empty")?;
    require(
        c.batch.iter().all(|&b| b >= 2) && !c.batch.is_empty(),
        "bn-curve.batch",
        "batch sizes must be at least 2",
    )?;
    require(c.samples.0 >= 2, "bn-curve.samples", "need at least 2")?;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    let mut k = 0;
    for &dist in &c.dist {
        for &b in &c.batch {
            let curve = mc_nonlinearity_curve(dist, b, &xs, c.samples.0, derive_seed(ctx.seed, k))?;
            k += 1;
            rows.extend(curve_rows(&curve));
            series.push(curve_series(format!("{dist} B={b}"), &curve));
        }
    }
    ctx.run.write_csv("curve.csv", &rows)?;
    series.push(identity_series(&xs));
    ctx.chart(
        "curve.svg",
        "Train-mode BN expectation",
        "test-mode value",
        "E[train-mode value]",
        &series,
    )
}

#[derive(Serialize)]
struct PolyRow {
    #[serde(rename = "B")]
    batch: usize,
    a1: f64,
    a3: f64,
    a5: f64,
    a7: f64,
    rmse: f64,
}

fn bn_poly(ctx: &mut Context, c: &BnPolyConfig) -> CliResult<()> {
    let xs = check_grid(c.lo, c.hi, c.step, "bn-poly")?;
    require(c.batch >= 2, "bn-poly.batch", "must be at least 2")?;
    require(c.samples.0 >= 2, "bn-poly.samples", "need at least 2")?;
    let curve = mc_nonlinearity_curve(c.dist, c.batch, &xs, c.samples.0, ctx.seed)?;
    let fit = fit_poly_correction(&curve, c.weighting)?;
    let [a1, a3, a5, a7] = fit.poly.coefficients();
    if !(fit.poly.coefficients().iter().all(|v| v.is_finite()) && fit.rmse.is_finite()) {
        return Err(CliError::Numerical(
            "polynomial fit produced non-finite coefficients".into(),
        ));
    }
    println!(
        "B={} {}: a1 {a1:.5}  a3 {a3:.4e}  a5 {a5:.4e}  a7 {a7:.4e}  rmse {:.2e}",
        c.batch, c.dist, fit.rmse
    );
    ctx.run.write_csv(
        "poly.csv",
        &[PolyRow {
            batch: c.batch,
            a1,
            a3,
            a5,
            a7,
            rmse: fit.rmse,
        }],
    )?;
    let rows: Vec<CurveRow> = curve_rows(&curve).collect();
    ctx.run.write_csv("curve.csv", &rows)?;
    let series = [
        curve_series("Monte Carlo".into(), &curve),
        Series::new("fitted polynomial", xs.iter().map(|&x| (x, fit.poly.eval(x))).collect()),
        identity_series(&xs),
    ];
    ctx.chart(
        "poly.svg",
        &format!("Test-mode correction, B={}", c.batch),
        "test-mode value",
        "E[train-mode value]",
        &series,
    )
}

#[derive(Serialize)]
struct AffineRow {
    op: &'static str,
    dist: SourceDistribution,
    #[serde(rename = "B")]
    batch: usize,
    slope: f64,
    intercept: f64,
    max_z: f64,
    affine: bool,
}

fn cn_check(ctx: &mut Context, c: &CnCheckConfig) -> CliResult<()> {
    let xs = check_grid(c.lo, c.hi, c.step, "cn-check")?;
    require(xs.len() >= 3, "cn-check.step", "grid needs at least 3 points")?;
    require(c.batch >= 4, "cn-check.batch", "must be at least 4")?;
    require(c.samples.0 >= 2, "cn-check.samples", "need at least 2")?;
    require(
        c.eps.is_finite() && c.eps >= 0.0,
        "cn-check.eps",
        "must be non-negative",
    )?;
    let cn = mc_cross_norm_curve(c.dist, c.batch, &xs, c.samples.0, c.eps, c.normalizer, ctx.seed)?;
    let bn = mc_nonlinearity_curve(c.dist, c.batch, &xs, c.samples.0, derive_seed(ctx.seed, 1))?;
    let mut fits = Vec::new();
    for (op, curve) in [("cross-norm", &cn), ("batch-norm", &bn)] {
        let f = affine_fit(curve)?;
        println!(
            "{op:<10} slope {:.4} intercept {:+.2e} max |residual|/stderr {:.2}",
            f.slope, f.intercept, f.max_z
        );
        fits.push(AffineRow {
            op,
            dist: c.dist,
            batch: c.batch,
            slope: f.slope,
            intercept: f.intercept,
            max_z: f.max_z,
            affine: f.max_z < 3.0,
        });
    }
    ctx.run
        .write_csv("cn_curve.csv", &curve_rows(&cn).collect::<Vec<_>>())?;
    ctx.run
        .write_csv("bn_curve.csv", &curve_rows(&bn).collect::<Vec<_>>())?;
    ctx.run.write_csv("affine_fit.csv", &fits)?;
    let series = [
        curve_series("cross-norm".into(), &cn),
        curve_series("batch-norm".into(), &bn),
        identity_series(&xs),
    ];
    ctx.chart(
        "cn.svg",
        &format!("Expected output, B={}", c.batch),
        "test-mode value",
        "expected output",
        &series,
    )?;
    if !fits[0].affine {
        return Err(CliError::Numerical(format!(
            "cross-normalization curve is not affine (max z {:.2})",
            fits[0].max_z
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct BudgetRow {
    dist: SourceDistribution,
    #[serde(rename = "B")]
    batch: usize,
    budget: f64,
    stderr: f64,
}

fn noise_budget_cmd(ctx: &mut Context, c: &NoiseBudgetConfig) -> CliResult<()> {
    require(!c.dist.is_empty(), "noise-budget.dist", "must not be empty")?;
    require(
        c.batch.iter().all(|&b| b >= 2) && !c.batch.is_empty(),
        "noise-budget.batch",
        "batch sizes must be at least 2",
    )?;
    require(c.outer.0 >= 2, "noise-budget.outer", "need at least 2")?;
    require(c.inner.0 >= 2, "noise-budget.inner", "need at least 2")?;
    let mut rows = Vec::new();
    let mut k = 0;
    for &dist in &c.dist {
        for &b in &c.batch {
            let (budget, stderr) = noise_budget(b, dist, c.outer.0, c.inner.0, derive_seed(ctx.seed, k))?;
            k += 1;
            println!("{dist} B={b}: E[Var[train | x]] = {budget:.4} +/- {stderr:.4}");
            rows.push(BudgetRow {
                dist,
                batch: b,
                budget,
                stderr,
            });
        }
    }
    ctx.run.write_csv("noise_budget.csv", &rows)?;
    let series: Vec<Series> = c
        .dist
        .iter()
        .map(|&d| {
            Series::new(
                d.to_string(),
                rows.iter()
                    .filter(|r| r.dist == d)
                    .map(|r| (r.batch as f64, r.budget))
                    .collect(),
            )
        })
        .collect();
    ctx.chart(
        "noise_budget.svg",
        "Train-mode noise",
        "batch size",
        "E[Var[train | x]]",
        &series,
    )
}

fn resolve_train_demo(mut cfg: TrainDemoConfig, a: &TrainDemoArgs) -> CliResult<TrainDemoConfig> {
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(path) = &a.data_csv {
        let val_fraction = match cfg.data {
            DataConfig::Csv { val_fraction, .. } => val_fraction,
            DataConfig::Mixture(_) => 0.2,
        };
        cfg.data = DataConfig::Csv {
            path: path.clone(),
            val_fraction,
        };
    }
    Ok(cfg)
}

/// Numeric CSV with a header; the last column holds integer class labels.
fn load_labelled_csv(path: &Path) -> CliResult<Dataset> {
    let bad = |line: usize, msg: &str| CliError::Config(format!("{}:{line}: {msg}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| bad(line, &e.to_string()))?;
        let n = record.len();
        if n < 2 || width.is_some_and(|w| w != n) {
            return Err(bad(line, "rows need the same number of columns, at least two"));
        }
        width = Some(n);
        for field in record.iter().take(n - 1) {
            values.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| bad(line, &format!("`{field}` is not a number")))?,
            );
        }
        let label = record[n - 1].trim();
        labels.push(
            label
                .parse::<usize>()
                .map_err(|_| bad(line, &format!("label `{label}` is not a class index")))?,
        );
    }
    let Some(width) = width else {
        return Err(bad(1, "no data rows"));
    };
    let x = DMatrix::from_row_slice(labels.len(), width - 1, &values);
    Ok(Dataset::new(x, labels)?)
}

fn split_dataset(all: &Dataset, val_fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let mut idx: Vec<usize> = (0..all.len()).collect();
    idx.shuffle(&mut stream_rng(derive_seed(seed, 0xC5F), 0));
    let n_val = ((all.len() as f64 * val_fraction).round() as usize).clamp(1, all.len() - 1);
    let pick = |ids: &[usize]| Dataset {
        x: all.x.select_rows(ids),
        y: ids.iter().map(|&i| all.y[i]).collect(),
    };
    (pick(&idx[n_val..]), pick(&idx[..n_val]))
}

/// Train and validation sets for a seed.
type SplitFn<'a> = dyn Fn(u64) -> rotout::Result<(Dataset, Dataset)> + 'a;

#[derive(Serialize)]
struct SummaryCsvRow {
    regularizer: String,
    strength: f64,
    seeds: usize,
    train_acc_mean: f64,
    train_acc_sd: f64,
    val_acc_mean: f64,
    val_acc_sd: f64,
    best_val_acc_mean: f64,
    gap_mean: f64,
    gap_sd: f64,
    /// Seeds on which the gap is smaller than the first regularizer's.
    wins_vs_first: usize,
    sign_test_p: f64,
}

fn train_demo(ctx: &mut Context, c: &TrainDemoConfig) -> CliResult<()> {
    require(c.seeds >= 1, "train-demo.seeds", "must be positive")?;
    require(!c.layers.is_empty(), "train-demo.layers", "must not be empty")?;
    require(
        c.layers.iter().all(|l| l.width >= 1),
        "train-demo.layers",
        "widths must be positive",
    )?;
    require(
        !c.regularizers.is_empty(),
        "train-demo.regularizers",
        "must not be empty",
    )?;
    require(c.train.epochs >= 1, "train-demo.train.epochs", "must be positive")?;
    let classes = c.layers.last().map_or(0, |l| l.width);

    let csv_data;
    let (input_dim, data): (usize, Box<SplitFn>) = match &c.data {
        DataConfig::Mixture(spec) => {
            require(
                spec.dim >= 1 && spec.n_train >= 2 && spec.n_val >= 1,
                "train-demo.data",
                "mixture needs dim >= 1, n_train >= 2, n_val >= 1",
            )?;
            require(
                classes >= 2,
                "train-demo.layers",
                "the last layer needs a width of at least 2",
            )?;
            let spec = *spec;
            (spec.dim, Box::new(move |s| Ok(spec.split(s))))
        }
        DataConfig::Csv { path, val_fraction } => {
            require(
                *val_fraction > 0.0 && *val_fraction < 1.0,
                "train-demo.data.val_fraction",
                "must lie in (0, 1)",
            )?;
            csv_data = load_labelled_csv(path)?;
            require(csv_data.len() >= 3, "train-demo.data.path", "need at least 3 rows")?;
            require(
                csv_data.classes() <= classes,
                "train-demo.layers",
                "last layer is narrower than the number of classes",
            )?;
            let (all, f) = (&csv_data, *val_fraction);
            (all.x.ncols(), Box::new(move |s| Ok(split_dataset(all, f, s))))
        }
    };
    let seeds: Vec<u64> = (0..c.seeds as u64).map(|k| ctx.seed.wrapping_add(k)).collect();
    let report = train_and_report(input_dim, &c.layers, &c.train, &*data, &c.regularizers, &seeds)?;
    ctx.run.write_csv("train.csv", &report.runs)?;

    let first = &report.summary[0];
    let summary: Vec<SummaryCsvRow> = report
        .summary
        .iter()
        .map(|s| {
            let wins = s.gaps.iter().zip(&first.gaps).filter(|(g, f)| g < f).count();
            SummaryCsvRow {
                regularizer: s.regularizer.clone(),
                strength: s.strength,
                seeds: s.seeds,
                train_acc_mean: s.train_acc_mean,
                train_acc_sd: s.train_acc_sd,
                val_acc_mean: s.val_acc_mean,
                val_acc_sd: s.val_acc_sd,
                best_val_acc_mean: s.best_val_acc_mean,
                gap_mean: s.gap_mean,
                gap_sd: s.gap_sd,
                wins_vs_first: wins,
                sign_test_p: sign_test_p_value(wins, s.gaps.len()),
            }
        })
        .collect();
    for s in &summary {
        println!(
            "{:<12} train {:.3}  val {:.3}  gap {:.3} +/- {:.3}  smaller gap than `{}` on {}/{} seeds (p = {:.4})",
            s.regularizer,
            s.train_acc_mean,
            s.val_acc_mean,
            s.gap_mean,
            s.gap_sd,
            first.regularizer,
            s.wins_vs_first,
            s.seeds,
            s.sign_test_p
        );
    }
    ctx.run.write_csv("summary.csv", &summary)?;

    let mut series = Vec::new();
    for reg in &c.regularizers {
        let mut val = vec![(0.0, 0usize); c.train.epochs];
        for r in report.runs.iter().filter(|r| r.regularizer == reg.label) {
            val[r.epoch - 1].0 += r.val_acc;
            val[r.epoch - 1].1 += 1;
        }
        let points = val
            .iter()
            .enumerate()
            .filter(|(_, v)| v.1 > 0)
            .map(|(e, v)| ((e + 1) as f64, v.0 / v.1 as f64))
            .collect();
        series.push(Series::new(reg.label.clone(), points));
    }
    ctx.chart(
        "train.svg",
        "Validation accuracy (mean over seeds)",
        "epoch",
        "accuracy",
        &series,
    )
}
