//! JSON scenario configuration.
//!
//! Every section is optional and defaults to the builtin benchmark, so a file
//! only lists what it changes. Only `version` is mandatory. Matrices are
//! arrays of rows; `null` in a box bound means that side is unbounded.

use std::path::PathBuf;

use ddpc_core::controller::{DistributionMode, Tightening, Variant};
use ddpc_core::estimator::FilterMode;
use ddpc_core::lti::Distribution;
use ddpc_core::predictor::RegularizerKind;
use ddpc_core::signal::Construction;
use nalgebra::DMatrix;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{HarnessError, Result};

pub const CONFIG_VERSION: u32 = 1;
/// Name that selects the builtin scenario in place of a file path.
pub const BUILTIN: &str = "paper-sec5";

/// Dense matrix written as an array of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix(pub DMatrix<f64>);

impl Matrix {
    pub fn scalar(x: f64) -> Self {
        Matrix(DMatrix::from_element(1, 1, x))
    }
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = self.0.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(D::Error::custom("matrix rows must all have the same length"));
        }
        Ok(Matrix(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j])))
    }
}

/// Enumerations spelled as lowercase strings in the file.
pub trait Named: Sized + Copy {
    const WHAT: &'static str;
    fn name(self) -> &'static str;
    fn parse(s: &str) -> Option<Self>;
}

macro_rules! named_via_from_str {
    ($t:ty, $what:literal) => {
        impl Named for $t {
            const WHAT: &'static str = $what;
            fn name(self) -> &'static str {
                self.as_str()
            }
            fn parse(s: &str) -> Option<Self> {
                s.parse().ok()
            }
        }
    };
}

named_via_from_str!(Variant, "variant");
named_via_from_str!(Tightening, "tightening");
named_via_from_str!(DistributionMode, "distribution mode");
named_via_from_str!(FilterMode, "filter mode");
named_via_from_str!(RegularizerKind, "predictor design");

impl Named for Construction {
    const WHAT: &'static str = "construction";
    fn name(self) -> &'static str {
        match self {
            Construction::Hankel => "hankel",
            Construction::Page => "page",
            Construction::Columns => "columns",
        }
    }
    fn parse(s: &str) -> Option<Self> {
        [Construction::Hankel, Construction::Page, Construction::Columns]
            .into_iter()
            .find(|c| c.name() == s)
    }
}

impl Named for Distribution {
    const WHAT: &'static str = "distribution";
    fn name(self) -> &'static str {
        match self {
            Distribution::Gaussian => "gaussian",
            Distribution::UniformScaled => "uniform-scaled",
        }
    }
    fn parse(s: &str) -> Option<Self> {
        [Distribution::Gaussian, Distribution::UniformScaled]
            .into_iter()
            .find(|d| d.name() == s)
    }
}

mod named {
    use super::*;

    pub fn serialize<S: Serializer, T: Named>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(v.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>, T: Named>(d: D) -> std::result::Result<T, D::Error> {
        let s = String::deserialize(d)?;
        T::parse(&s).ok_or_else(|| D::Error::custom(format!("unknown {} `{s}`", T::WHAT)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub predictor: PredictorSpec,
    #[serde(default)]
    pub control: ControlSpec,
    #[serde(default)]
    pub constraints: ConstraintsSpec,
    #[serde(default)]
    pub reference: ReferenceSpec,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub monte_carlo: MonteCarloSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            model: ModelSpec::default(),
            data: DataSpec::default(),
            predictor: PredictorSpec::default(),
            control: ControlSpec::default(),
            constraints: ConstraintsSpec::default(),
            reference: ReferenceSpec::default(),
            noise: NoiseConfig::default(),
            monte_carlo: MonteCarloSpec::default(),
            output: OutputSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BuiltinModel {
    #[serde(rename = "paper-sec5")]
    PaperSec5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Builtin(BuiltinModel),
    Matrices(MatrixModel),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Builtin(BuiltinModel::PaperSec5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixModel {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub d: Matrix,
    /// `n_x × n_w`; rows of empty arrays when there is no disturbance.
    pub e: Matrix,
    /// Accept a spectral radius of exactly one.
    #[serde(default)]
    pub marginal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub length: usize,
    pub input_variance: f64,
    pub disturbance_variance: f64,
    #[serde(with = "named")]
    pub construction: Construction,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            length: 500,
            input_variance: 1.0,
            disturbance_variance: 1.0,
            construction: Construction::Hankel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSpec {
    #[serde(with = "named")]
    pub design: RegularizerKind,
    pub l0: usize,
    pub lp: usize,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self {
            design: RegularizerKind::Mmse,
            l0: 4,
            lp: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSpec {
    pub q: Matrix,
    pub r: Matrix,
    pub p: f64,
    #[serde(with = "named")]
    pub tightening: Tightening,
    #[serde(with = "named")]
    pub distribution_mode: DistributionMode,
    #[serde(with = "named")]
    pub variant: Variant,
    #[serde(with = "named")]
    pub filter_mode: FilterMode,
    pub solver_tol: f64,
    pub max_iter: usize,
    pub retry_budget: usize,
    /// Closed-loop length, after the `L0`-step warm-up.
    pub steps: usize,
}

impl Default for ControlSpec {
    fn default() -> Self {
        Self {
            q: Matrix::scalar(20.0),
            r: Matrix::scalar(1.0),
            p: 0.95,
            tightening: Tightening::Elementwise,
            distribution_mode: DistributionMode::Chebyshev,
            variant: Variant::SDdpc,
            filter_mode: FilterMode::PaperLiteral,
            solver_tol: 1e-8,
            max_iter: 200,
            retry_budget: 3,
            steps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintSpec {
    None,
    Box {
        lower: Vec<Option<f64>>,
        upper: Vec<Option<f64>>,
    },
    Polytope {
        h: Matrix,
        q: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintsSpec {
    pub output: ConstraintSpec,
    pub input: ConstraintSpec,
}

impl Default for ConstraintsSpec {
    fn default() -> Self {
        Self {
            output: ConstraintSpec::Box {
                lower: vec![Some(-0.25)],
                upper: vec![Some(1.05)],
            },
            input: ConstraintSpec::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    /// `low` for `period` steps, then `high` for `period` steps, repeated.
    Square {
        low: Vec<f64>,
        high: Vec<f64>,
        period: usize,
    },
    Constant {
        value: Vec<f64>,
    },
    /// One sample per step; the last one is held.
    Table {
        values: Vec<Vec<f64>>,
    },
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        ReferenceSpec::Square {
            low: vec![0.0],
            high: vec![1.0],
            period: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovarianceSpec {
    /// Multiple of the identity.
    Scale(f64),
    Full(Matrix),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Output noise variance, offline and online.
    pub sigma2: f64,
    /// Covariance of the stacked `n_w L` disturbance window.
    pub sigma_w: CovarianceSpec,
    /// Stacked disturbance mean; zero when absent.
    pub w_bar: Option<Vec<f64>>,
    #[serde(with = "named")]
    pub distribution: Distribution,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma2: 0.01,
            sigma_w: CovarianceSpec::Scale(0.001),
            w_bar: None,
            distribution: Distribution::Gaussian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloSpec {
    pub runs: usize,
    pub base_seed: u64,
}

impl Default for MonteCarloSpec {
    fn default() -> Self {
        Self { runs: 50, base_seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("ddpc-out"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub runs: Option<usize>,
    pub horizon: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn builtin() -> Self {
        Self::default()
    }

    /// Parses a configuration document. Errors carry the line and column.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            let line = text.lines().position(|l| l.contains("\"version\"")).map_or(1, |i| i + 1);
            return Err(HarnessError::Config(format!(
                "config: unsupported version {} at line {line} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    /// [`BUILTIN`] or a path to a JSON file.
    pub fn load(source: &str) -> Result<Self> {
        if source == BUILTIN {
            return Ok(Self::builtin());
        }
        let text = std::fs::read_to_string(source).map_err(|e| HarnessError::Config(format!("config {source}: {e}")))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration is always serializable") + "\n"
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.monte_carlo.base_seed = seed;
        }
        if let Some(v) = o.variant {
            self.control.variant = v;
        }
        if let Some(runs) = o.runs {
            self.monte_carlo.runs = runs;
        }
        if let Some(h) = o.horizon {
            self.predictor.lp = h;
        }
        if let Some(out) = &o.out {
            self.output.dir = out.clone();
        }
    }
}
