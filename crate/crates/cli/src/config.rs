//! Experiment configuration: TOML with an explicit schema version and no unknown keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bslab_core::spectra::FitWindow;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub domain: DomainSpec,
    #[serde(default)]
    pub operator: OperatorSpec,
    pub measure: MeasureSpec,
    #[serde(default)]
    pub weights: WeightsSpec,
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub analysis: AnalysisSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Nodes per axis; a scalar applies to every axis.
    pub resolution: Resolution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Resolution {
    Uniform(usize),
    PerAxis(Vec<usize>),
}

impl DomainSpec {
    pub fn shape(&self) -> Vec<usize> {
        match &self.resolution {
            Resolution::Uniform(n) => vec![*n; self.lo.len()],
            Resolution::PerAxis(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorSpec {
    pub t: f64,
    pub coefficient: CoefficientSpec,
    /// Double t (at most three times) when the positivity margin is too small.
    pub auto_raise: bool,
    pub margin: f64,
    /// Node cap for the dense discretization.
    pub node_cap: usize,
}

impl Default for OperatorSpec {
    fn default() -> Self {
        Self {
            t: 1.0,
            coefficient: CoefficientSpec::Laplacian,
            auto_raise: true,
            margin: bslab_core::resolvents::DEFAULT_MARGIN,
            node_cap: bslab_core::elliptic::DEFAULT_NODE_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientSpec {
    Laplacian,
    Isotropic {
        c: f64,
    },
    /// Constant symmetric matrix, row by row.
    Constant {
        a: Vec<Vec<f64>>,
    },
    /// a(x) = diag(1 + amplitude·x_axis, 1, ...).
    Graded {
        axis: usize,
        amplitude: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    Ifs {
        #[serde(default)]
        preset: Option<IfsPreset>,
        #[serde(default)]
        maps: Vec<MapSpec>,
        depth: usize,
    },
    Segment {
        a: Vec<f64>,
        b: Vec<f64>,
        count: usize,
    },
    Boundary {
        #[serde(default = "one")]
        per_cell: usize,
    },
    Lebesgue {
        #[serde(default)]
        region_lo: Option<Vec<f64>>,
        #[serde(default)]
        region_hi: Option<Vec<f64>>,
    },
    Union {
        parts: Vec<MeasureSpec>,
    },
    File {
        path: PathBuf,
    },
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IfsPreset {
    Cantor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    pub ratio: f64,
    pub translation: Vec<f64>,
    /// Rotation angle, planar maps only.
    #[serde(default)]
    pub angle: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSpec {
    #[serde(default)]
    pub v1: Option<WeightSpec>,
    #[serde(default)]
    pub v2: Option<WeightSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, toml::Value>")]
pub struct WeightSpec {
    #[serde(flatten)]
    pub shape: WeightShape,
    /// Gaussian mollification radius.
    #[serde(default)]
    pub mollify: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightShape {
    Constant {
        value: f64,
    },
    /// `below` where x_axis < threshold, `above` otherwise.
    Step {
        axis: usize,
        threshold: f64,
        below: f64,
        above: f64,
    },
    /// amplitude·exp(1 − 1/(1 − (|x − center|/radius)²)) inside the ball, zero outside.
    Bump {
        center: Vec<f64>,
        radius: f64,
        amplitude: f64,
    },
    /// Per-atom values from the `V` column of a CSV file.
    File {
        path: PathBuf,
    },
    /// Independent uniform values on [lo, hi), drawn from the config seed.
    Random {
        lo: f64,
        hi: f64,
    },
}

// `mollify` sits beside the tagged shape; serde cannot combine flatten with unknown-key checks.
impl TryFrom<BTreeMap<String, toml::Value>> for WeightSpec {
    type Error = String;

    fn try_from(mut table: BTreeMap<String, toml::Value>) -> Result<Self, String> {
        let mollify = match table.remove("mollify") {
            None => None,
            Some(toml::Value::Float(r)) => Some(r),
            Some(toml::Value::Integer(r)) => Some(r as f64),
            Some(other) => return Err(format!("mollify must be a number, got {other}")),
        };
        let shape =
            toml::Value::Table(table.into_iter().collect()).try_into().map_err(|e: toml::de::Error| e.to_string())?;
        Ok(Self { shape, mollify })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Spectrum of R_{V1} = A^{-1} − A_{V1}^{-1}.
    ResolventDiff,
    /// Spectrum of A_{V2}^{-1} − A_{V1}^{-1}.
    TwoWeightDiff,
    /// Spectra of A_{V1}^{-m} − A^{-m} and its H2, H3 groups.
    PowerDiff { m: usize },
    /// Spectrum of the Birman–Schwinger operator T (l = 1/2) for V1.
    KreinFeller,
    /// Two Robin densities on the boundary measure.
    RobinDiff,
    /// Two-weight spectrum compared against the Weyl prediction.
    WeylCheck,
}

impl TaskSpec {
    pub fn slug(&self) -> String {
        match self {
            TaskSpec::ResolventDiff => "resolvent_diff".into(),
            TaskSpec::TwoWeightDiff => "two_weight_diff".into(),
            TaskSpec::PowerDiff { m } => format!("power_diff_m{m}"),
            TaskSpec::KreinFeller => "krein_feller".into(),
            TaskSpec::RobinDiff => "robin_diff".into(),
            TaskSpec::WeylCheck => "weyl_check".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    /// Dense matrices up to `dense_limit` nodes, the modal route above.
    #[default]
    Auto,
    Dense,
    Modal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSpec {
    pub window: FitWindow,
    /// Noise floor relative to ‖K‖.
    pub relative_floor: f64,
    pub route: Route,
    pub dense_limit: usize,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            window: FitWindow::Auto,
            relative_floor: bslab_core::spectra::DEFAULT_RELATIVE_FLOOR,
            route: Route::Auto,
            dense_limit: 1200,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| CliError::Validation(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: toml::Value) -> CliResult<Self> {
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| CliError::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes file paths relative to the config file absolute.
    pub fn resolve_paths(&mut self, base: &Path) {
        fn fix(p: &mut PathBuf, base: &Path) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        fn walk(m: &mut MeasureSpec, base: &Path) {
            match m {
                MeasureSpec::File { path } => fix(path, base),
                MeasureSpec::Union { parts } => parts.iter_mut().for_each(|p| walk(p, base)),
                _ => {}
            }
        }
        walk(&mut self.measure, base);
        for w in [&mut self.weights.v1, &mut self.weights.v2].into_iter().flatten() {
            if let WeightShape::File { path } = &mut w.shape {
                fix(path, base);
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Validation(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        let n = self.domain.lo.len();
        if n == 0 || self.domain.hi.len() != n || self.domain.shape().len() != n {
            return bad("domain lo, hi and resolution must agree in dimension".into());
        }
        if !(self.operator.t > 0.0) {
            return bad("operator.t must be positive".into());
        }
        if !(0.0..1.0).contains(&self.operator.margin) {
            return bad("operator.margin must lie in [0, 1)".into());
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        if !(self.analysis.relative_floor >= 0.0) {
            return bad("analysis.relative_floor must be nonnegative".into());
        }
        match self.analysis.window {
            FitWindow::Indices { first, last } if first == 0 || last <= first => {
                return bad(format!("fit window {first}..={last} must satisfy 1 <= first < last"));
            }
            FitWindow::Lambda { min, max } if !(min > 0.0 && max > min) => {
                return bad(format!("fit window lambda [{min}, {max}] must satisfy 0 < min < max"));
            }
            FitWindow::Ranks { first, last_fraction }
                if first == 0 || !(last_fraction > 0.0 && last_fraction <= 1.0) =>
            {
                return bad("rank window needs first >= 1 and last_fraction in (0, 1]".into());
            }
            _ => {}
        }
        for task in &self.tasks {
            match task {
                TaskSpec::PowerDiff { m } if !(1..=bslab_core::resolvents::MAX_POWER).contains(m) => {
                    return bad(format!("power_diff m = {m} outside 1..=4"));
                }
                TaskSpec::TwoWeightDiff | TaskSpec::RobinDiff | TaskSpec::WeylCheck if self.weights.v2.is_none() => {
                    return bad(format!("task {} needs weights.v2", task.slug()));
                }
                TaskSpec::RobinDiff if !matches!(self.measure, MeasureSpec::Boundary { .. }) => {
                    return bad("robin_diff needs a boundary measure".into());
                }
                TaskSpec::WeylCheck if !matches!(self.measure, MeasureSpec::Segment { .. }) || n != 2 => {
                    return bad("weyl_check needs a segment measure in two dimensions".into());
                }
                _ => {}
            }
        }
        if let MeasureSpec::Ifs { preset, maps, .. } = &self.measure {
            if preset.is_some() == !maps.is_empty() {
                return bad("ifs measure needs exactly one of preset or maps".into());
            }
        }
        Ok(())
    }

    /// Canonical JSON serialization, the input of the config hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn v1(&self) -> WeightSpec {
        self.weights.v1.clone().unwrap_or(WeightSpec { shape: WeightShape::Constant { value: 1.0 }, mollify: None })
    }
}

/// Sets a dotted path (e.g. `measure.depth`) in a TOML document to a scalar.
pub fn set_dotted(doc: &mut toml::Value, path: &str, value: toml::Value) -> CliResult<()> {
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        let next = match cur {
            toml::Value::Table(t) => {
                if last {
                    match t.get(*key) {
                        Some(old) if old.is_table() || old.is_array() => {
                            return Err(CliError::Validation(format!("sweep axis {path} is not a scalar field")));
                        }
                        _ => {}
                    }
                    t.insert((*key).to_string(), value);
                    return Ok(());
                }
                t.get_mut(*key)
            }
            toml::Value::Array(a) => key.parse::<usize>().ok().and_then(|k| a.get_mut(k)),
            _ => None,
        };
        cur = next.ok_or_else(|| CliError::Validation(format!("sweep axis {path} does not exist")))?;
    }
    Err(CliError::Validation(format!("sweep axis {path} is empty")))
}

/// Parses a sweep value as a TOML scalar (integer, float, boolean or bare string).
pub fn parse_scalar(text: &str) -> toml::Value {
    let text = text.trim();
    if let Ok(i) = text.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = text.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if let Ok(b) = text.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    toml::Value::String(text.to_string())
}
