//! Command line, config file, and how the two combine.
//!
//! The config file is TOML. Top-level keys are the global options; each
//! subcommand reads the table of the same name. Any flag given on the
//! command line replaces the file's value for that key.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::de::{self, DeserializeOwned, Deserializer, Visitor};
use serde::{Deserialize, Serialize};

use rotout::bn_lab::{FitWeighting, LooNormalizer, SourceDistribution};
use rotout::nn::{Activation, LayerSpec, MixtureSpec, Regularizer, TrainConfig};
use rotout::noise_lab::Method;
use rotout::regularizers::{NoiseKind, NoiseOpSpec};
use rotout::rotation::AngleDistribution;

use crate::error::{CliError, CliResult};

pub const OUT_DIR_ENV: &str = "ROTOUT_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "rotout-out";

#[derive(Parser, Debug)]
#[command(
    name = "rotout",
    version,
    about = "Seeded Monte-Carlo experiments on rotation noise and the dropout family"
)]
pub struct Cli {
    /// TOML config file. Flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Base random seed [default: 0].
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Root output directory [default: $ROTOUT_OUT_DIR, else ./rotout-out].
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,

    /// Also render SVG plots next to the CSV files.
    #[arg(long, global = true)]
    pub plot: bool,

    /// Run Monte-Carlo loops on the calling thread only.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check the rotation operator's algebraic and Monte-Carlo invariants.
    VerifyRotation(VerifyRotationArgs),
    /// Co-adaptation reduction of dropout versus rotation on correlated features.
    Coadapt(CoadaptArgs),
    /// Condition numbers of the marginalized regression systems.
    Linreg(LinregArgs),
    /// Angle between inputs and their dropped-out versions, and rotation flip rates.
    AngleDemo(AngleDemoArgs),
    /// Train/test variance shift of dropout placed before batch normalization.
    VarShift(VarShiftArgs),
    /// Expected train-mode BN output against the test-mode value.
    BnCurve(BnCurveArgs),
    /// Odd polynomial correction for test-mode BN at a small batch size.
    BnPoly(BnPolyArgs),
    /// Linearity of cross-normalization in expectation, against plain BN.
    CnCheck(CnCheckArgs),
    /// Variance of train-mode BN output given the input.
    NoiseBudget(NoiseBudgetArgs),
    /// Train small networks with and without noise and compare generalization gaps.
    TrainDemo(TrainDemoArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::VerifyRotation(_) => "verify-rotation",
            Self::Coadapt(_) => "coadapt",
            Self::Linreg(_) => "linreg",
            Self::AngleDemo(_) => "angle-demo",
            Self::VarShift(_) => "var-shift",
            Self::BnCurve(_) => "bn-curve",
            Self::BnPoly(_) => "bn-poly",
            Self::CnCheck(_) => "cn-check",
            Self::NoiseBudget(_) => "noise-budget",
            Self::TrainDemo(_) => "train-demo",
        }
    }
}

/// A sample count. Accepts plain integers and integral scientific notation
/// such as `1e6`, on the command line and in the config file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct Count(pub usize);

impl FromStr for Count {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if let Ok(n) = s.parse::<usize>() {
            return Ok(Count(n));
        }
        let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a count"))?;
        Count::from_f64(v).ok_or_else(|| format!("`{s}` is not a whole non-negative count"))
    }
}

impl Count {
    fn from_f64(v: f64) -> Option<Self> {
        (v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= 9.0e15).then_some(Count(v as usize))
    }
}

impl<'de> Deserialize<'de> for Count {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct CountVisitor;

        impl Visitor<'_> for CountVisitor {
            type Value = Count;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a whole non-negative count like 1000 or \"1e6\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Count, E> {
                Ok(Count(v as usize))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Count, E> {
                usize::try_from(v)
                    .map(Count)
                    .map_err(|_| E::custom("count must be non-negative"))
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Count, E> {
                Count::from_f64(v).ok_or_else(|| E::custom(format!("{v} is not a whole non-negative count")))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Count, E> {
                v.parse().map_err(E::custom)
            }
        }

        d.deserialize_any(CountVisitor)
    }
}

/// Parses a kebab-case enum name through its serde representation.
fn parse_name<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    T::deserialize(de::value::StrDeserializer::<de::value::Error>::new(s)).map_err(|e| e.to_string())
}

// Flag structs: every field optional so that an absent flag leaves the
// file's value alone. Field names match the config keys.

#[derive(Args, Debug, Serialize)]
pub struct VerifyRotationArgs {
    /// Dimension of the rotated vector.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Standard deviation of the tangent.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Monte-Carlo draws.
    #[arg(long)]
    pub samples: Option<Count>,
}

#[derive(Args, Debug, Serialize)]
pub struct CoadaptArgs {
    /// Noise methods, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_name::<Method>)]
    pub methods: Option<Vec<Method>>,
    /// Keep rates, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub p: Option<Vec<f64>>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Correlation of the equicorrelated source.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long, value_parser = parse_name::<FeatureKind>)]
    pub source: Option<FeatureKind>,
    /// Noise only the deviation from the mean.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub centered: Option<bool>,
    #[arg(long)]
    pub samples: Option<Count>,
}

#[derive(Args, Debug, Serialize)]
pub struct LinregArgs {
    /// Noise strength (1-p)/p.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Rows of each design matrix.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Number of random problems.
    #[arg(long)]
    pub problems: Option<usize>,
    /// Zero out the last column of every design.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub degenerate_column: Option<bool>,
}

#[derive(Args, Debug, Serialize)]
pub struct AngleDemoArgs {
    /// Dimension for the dropout angle experiment.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Dropout keep rates, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub p: Option<Vec<f64>>,
    #[arg(long)]
    pub samples: Option<Count>,
    /// Classes of the linear classifier in the flip-rate demo.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Input dimension of the flip-rate demo.
    #[arg(long)]
    pub margin_dim: Option<usize>,
    /// Equivalent keep rate of the rotation in the flip-rate demo.
    #[arg(long)]
    pub keep_rate: Option<f64>,
    #[arg(long)]
    pub margin_samples: Option<Count>,
}

#[derive(Args, Debug, Serialize)]
pub struct VarShiftArgs {
    /// Dropout keep rate.
    #[arg(long)]
    pub p: Option<f64>,
    /// Width of the feature layer.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Units (weight rows) of the next layer.
    #[arg(long)]
    pub units: Option<usize>,
    /// Independent repetitions of the comparison.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub centered: Option<bool>,
}

#[derive(Args, Debug, Serialize)]
pub struct BnCurveArgs {
    /// Source distributions, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_name::<SourceDistribution>)]
    pub dist: Option<Vec<SourceDistribution>>,
    /// Batch sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub batch: Option<Vec<usize>>,
    #[arg(long, allow_hyphen_values = true)]
    pub lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub hi: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    /// Draws per grid point.
    #[arg(long)]
    pub samples: Option<Count>,
}

#[derive(Args, Debug, Serialize)]
pub struct BnPolyArgs {
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, value_parser = parse_name::<SourceDistribution>)]
    pub dist: Option<SourceDistribution>,
    /// Draws per grid point.
    #[arg(long)]
    pub samples: Option<Count>,
    #[arg(long, allow_hyphen_values = true)]
    pub lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub hi: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    /// `density` or `uniform`.
    #[arg(long, value_parser = parse_name::<FitWeighting>)]
    pub weighting: Option<FitWeighting>,
}

#[derive(Args, Debug, Serialize)]
pub struct CnCheckArgs {
    #[arg(long, value_parser = parse_name::<SourceDistribution>)]
    pub dist: Option<SourceDistribution>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub hi: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub samples: Option<Count>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// `except-self` (divide by B-1) or `full-batch` (divide by B).
    #[arg(long, value_parser = parse_name::<LooNormalizer>)]
    pub normalizer: Option<LooNormalizer>,
}

#[derive(Args, Debug, Serialize)]
pub struct NoiseBudgetArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_name::<SourceDistribution>)]
    pub dist: Option<Vec<SourceDistribution>>,
    #[arg(long, value_delimiter = ',')]
    pub batch: Option<Vec<usize>>,
    /// Inputs drawn per estimate.
    #[arg(long)]
    pub outer: Option<Count>,
    /// Companion batches per input.
    #[arg(long)]
    pub inner: Option<Count>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainDemoArgs {
    /// Number of paired seeds, counted up from the base seed.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Labelled CSV to train on instead of the synthetic mixture.
    #[arg(long, value_name = "FILE")]
    pub data_csv: Option<PathBuf>,
}

// Resolved configs with their documented defaults.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Gaussian,
    Relu,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyRotationConfig {
    pub dim: usize,
    pub sigma: f64,
    pub samples: Count,
}

impl Default for VerifyRotationConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            sigma: 0.5,
            samples: Count(1_000_000),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoadaptConfig {
    pub methods: Vec<Method>,
    pub p: Vec<f64>,
    pub dim: usize,
    pub rho: f64,
    pub source: FeatureKind,
    pub centered: bool,
    pub samples: Count,
}

impl Default for CoadaptConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Dropout, Method::Rotation],
            p: vec![0.5, 0.8, 0.9],
            dim: 8,
            rho: 0.5,
            source: FeatureKind::Gaussian,
            centered: true,
            samples: Count(1_000_000),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinregConfig {
    pub lambda: f64,
    pub dim: usize,
    pub rows: usize,
    pub problems: usize,
    pub degenerate_column: bool,
}

impl Default for LinregConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            dim: 8,
            rows: 50,
            problems: 10,
            degenerate_column: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AngleDemoConfig {
    pub dim: usize,
    pub p: Vec<f64>,
    pub samples: Count,
    pub classes: usize,
    pub margin_dim: usize,
    pub keep_rate: f64,
    pub margin_samples: Count,
}

impl Default for AngleDemoConfig {
    fn default() -> Self {
        Self {
            dim: 1024,
            p: vec![0.5, 0.8],
            samples: Count(10_000),
            classes: 3,
            margin_dim: 16,
            keep_rate: 0.8,
            margin_samples: Count(10_000),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarShiftConfig {
    pub p: f64,
    pub dim: usize,
    pub units: usize,
    pub trials: usize,
    pub centered: bool,
}

impl Default for VarShiftConfig {
    fn default() -> Self {
        Self {
            p: 0.5,
            dim: 64,
            units: 256,
            trials: 100,
            centered: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnCurveConfig {
    pub dist: Vec<SourceDistribution>,
    pub batch: Vec<usize>,
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    pub samples: Count,
}

impl Default for BnCurveConfig {
    fn default() -> Self {
        Self {
            dist: vec![SourceDistribution::Gaussian],
            batch: vec![4, 8, 16],
            lo: -5.0,
            hi: 5.0,
            step: 0.1,
            samples: Count(100_000),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnPolyConfig {
    pub batch: usize,
    pub dist: SourceDistribution,
    pub samples: Count,
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    pub weighting: FitWeighting,
}

impl Default for BnPolyConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            dist: SourceDistribution::Gaussian,
            samples: Count(1_000_000),
            lo: -5.0,
            hi: 5.0,
            step: 0.05,
            weighting: FitWeighting::Density,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnCheckConfig {
    pub dist: SourceDistribution,
    pub batch: usize,
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    pub samples: Count,
    pub eps: f64,
    pub normalizer: LooNormalizer,
}

impl Default for CnCheckConfig {
    fn default() -> Self {
        Self {
            dist: SourceDistribution::Gaussian,
            batch: 8,
            lo: -3.0,
            hi: 3.0,
            step: 0.25,
            samples: Count(100_000),
            eps: 1e-5,
            normalizer: LooNormalizer::ExceptSelf,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseBudgetConfig {
    pub dist: Vec<SourceDistribution>,
    pub batch: Vec<usize>,
    pub outer: Count,
    pub inner: Count,
}

impl Default for NoiseBudgetConfig {
    fn default() -> Self {
        Self {
            dist: vec![SourceDistribution::Gaussian],
            batch: vec![4, 8, 16],
            outer: Count(2000),
            inner: Count(2000),
        }
    }
}

/// Where training data comes from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Two-class Gaussian mixture drawn afresh for every seed.
    Mixture(MixtureSpec),
    /// Numeric CSV with a header row and an integer label in the last
    /// column, split into train and validation per seed.
    Csv { path: PathBuf, val_fraction: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainDemoConfig {
    pub seeds: usize,
    pub data: DataConfig,
    pub layers: Vec<LayerSpec>,
    pub train: TrainConfig,
    pub regularizers: Vec<Regularizer>,
}

impl Default for TrainDemoConfig {
    fn default() -> Self {
        let rotation = Regularizer {
            label: "rotation".into(),
            noise: Some(NoiseOpSpec::dense(NoiseKind::Rotation {
                angle: AngleDistribution::GaussianTangent { sigma: 0.5 },
            })),
            include_input: true,
        };
        Self {
            seeds: 5,
            data: DataConfig::Mixture(MixtureSpec::default()),
            layers: vec![
                LayerSpec::dense(128, Activation::Relu),
                LayerSpec::dense(128, Activation::Relu),
                LayerSpec::dense(2, Activation::None),
            ],
            train: TrainConfig::default(),
            regularizers: vec![Regularizer::baseline(), rotation],
        }
    }
}

/// The whole config file. Every table is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub plot: Option<bool>,
    pub sequential: Option<bool>,
    #[serde(default, rename = "verify-rotation")]
    pub verify_rotation: VerifyRotationConfig,
    #[serde(default)]
    pub coadapt: CoadaptConfig,
    #[serde(default)]
    pub linreg: LinregConfig,
    #[serde(default, rename = "angle-demo")]
    pub angle_demo: AngleDemoConfig,
    #[serde(default, rename = "var-shift")]
    pub var_shift: VarShiftConfig,
    #[serde(default, rename = "bn-curve")]
    pub bn_curve: BnCurveConfig,
    #[serde(default, rename = "bn-poly")]
    pub bn_poly: BnPolyConfig,
    #[serde(default, rename = "cn-check")]
    pub cn_check: CnCheckConfig,
    #[serde(default, rename = "noise-budget")]
    pub noise_budget: NoiseBudgetConfig,
    #[serde(default, rename = "train-demo")]
    pub train_demo: TrainDemoConfig,
}

/// Reads and validates a config file. Errors name the file, line and key.
pub fn load_config(path: &Path) -> CliResult<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
        let msg = e.message().trim().replace('\n', " ");
        match line {
            Some(l) => CliError::Config(format!("{}:{l}: {msg}", path.display())),
            None => CliError::Config(format!("{}: {msg}", path.display())),
        }
    })
}

/// Replaces the keys of `base` that are set in `flags`.
pub fn overlay<C: Serialize + DeserializeOwned>(section: &str, base: C, flags: &impl Serialize) -> CliResult<C> {
    let bad = |e: &dyn fmt::Display| CliError::Config(format!("[{section}] {e}"));
    let toml::Value::Table(mut table) = toml::Value::try_from(&base).map_err(|e| bad(&e))? else {
        return Err(bad(&"config is not a table"));
    };
    if let toml::Value::Table(set) = toml::Value::try_from(flags).map_err(|e| bad(&e))? {
        table.extend(set);
    }
    toml::Value::Table(table).try_into().map_err(|e| bad(&e))
}

/// Output directory: flag, then config file, then environment, then default.
pub fn out_root(flag: Option<PathBuf>, file: Option<PathBuf>) -> PathBuf {
    flag.or(file)
        .or_else(|| {
            std::env::var_os(OUT_DIR_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
        })
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}
