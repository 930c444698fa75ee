//! Experiment configs: JSON on disk, `--set` overrides, typed parsing with
//! field paths in error messages.

use std::path::Path;

use drobas::bench::{CvSelection, DgpSpec, Method, NewsvendorConfig, PortfolioConfig};
use drobas::duals::LossSpec;
use drobas::solver::{FeasibleSet, SolveConfig};
use drobas::{ConjugatePosterior, Samples, StandardParams};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    Newsvendor(NewsvendorConfig),
    Portfolio(PortfolioConfig),
    Cv(CvConfig),
    Tolerances(TolerancesConfig),
    SolveOne(SolveOneConfig),
}

impl ExperimentConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentConfig::Newsvendor(_) => "newsvendor",
            ExperimentConfig::Portfolio(_) => "portfolio",
            ExperimentConfig::Cv(_) => "cv",
            ExperimentConfig::Tolerances(_) => "tolerances",
            ExperimentConfig::SolveOne(_) => "solve-one",
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: drobas::DroError| CliError::Config(e.to_string());
        match self {
            ExperimentConfig::Newsvendor(c) => c.validate().map_err(cfg),
            ExperimentConfig::Portfolio(c) => {
                c.validate().map_err(cfg)?;
                match &c.returns_path {
                    Some(p) => require_file(p),
                    None => Ok(()),
                }
            }
            ExperimentConfig::Cv(c) => c.validate(),
            ExperimentConfig::Tolerances(c) => c.validate(),
            ExperimentConfig::SolveOne(c) => c.validate(),
        }
    }
}

fn require_file(p: &str) -> Result<(), CliError> {
    if Path::new(p).is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("referenced file '{p}' does not exist")))
    }
}

/// Observations given inline, as scalars or as rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InlineData {
    Scalars(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

impl InlineData {
    pub fn to_samples(&self) -> Result<Samples, CliError> {
        match self {
            InlineData::Scalars(v) => Ok(Samples::from_scalars(v)),
            InlineData::Rows(r) => Samples::from_rows(r).map_err(|e| CliError::Config(format!("data: {e}"))),
        }
    }
}

/// Observations from exactly one of: inline values, a CSV file, or draws from a DGP.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<InlineData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dgp: Option<DgpSpec>,
    /// Number of DGP draws.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

impl DataSource {
    fn validate(&self, required: bool) -> Result<(), CliError> {
        let count = [self.data.is_some(), self.data_path.is_some(), self.dgp.is_some()]
            .iter()
            .filter(|b| **b)
            .count();
        if count > 1 {
            return Err(CliError::Config("give only one of data, data_path and dgp".into()));
        }
        if required && count == 0 {
            return Err(CliError::Config("observations required: give data, data_path or dgp".into()));
        }
        if let Some(p) = &self.data_path {
            require_file(p)?;
        }
        if let Some(d) = &self.dgp {
            d.validate().map_err(|e| CliError::Config(e.to_string()))?;
            if !matches!(self.n, Some(n) if n > 0) {
                return Err(CliError::Config("n must be >= 1 when sampling from dgp".into()));
            }
        }
        if let Some(d) = &self.data {
            d.to_samples()?;
        }
        Ok(())
    }

    /// `None` when no source was given.
    pub fn load(&self, seed: u64) -> Result<Option<Samples>, CliError> {
        if let Some(d) = &self.data {
            return d.to_samples().map(Some);
        }
        if let Some(p) = &self.data_path {
            let f = std::fs::File::open(p).map_err(|e| CliError::Ingestion(format!("{p}: {e}")))?;
            let parsed = drobas::bench::read_returns_csv(f, &[]).map_err(|e| CliError::Ingestion(format!("{p}: {e}")))?;
            return Ok(Some(parsed.returns));
        }
        if let (Some(dgp), Some(n)) = (&self.dgp, self.n) {
            let mut rng = drobas::bench::cell_rng(seed, "observations");
            return Ok(Some(drobas::bench::sample_dgp(dgp, n, &mut rng)));
        }
        Ok(None)
    }
}

fn default_folds() -> usize {
    10
}
fn default_selection() -> CvSelection {
    CvSelection::MinMean
}
fn default_cv_m() -> usize {
    100
}
fn default_loss() -> LossSpec {
    LossSpec::Newsvendor { h: 3.0, b: 8.0 }
}
fn default_box() -> (f64, f64) {
    (0.0, 100.0)
}

/// k-fold cross-validation of the radius on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    #[serde(default)]
    pub observations: DataSource,
    #[serde(default)]
    pub prior: Option<ConjugatePosterior>,
    pub method: Method,
    pub epsilon: Vec<f64>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_selection")]
    pub selection: CvSelection,
    #[serde(default = "default_cv_m")]
    pub m_samples: usize,
    #[serde(default = "default_loss")]
    pub loss: LossSpec,
    #[serde(default = "default_box")]
    pub box_bounds: (f64, f64),
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolveConfig,
}

impl CvConfig {
    fn validate(&self) -> Result<(), CliError> {
        self.observations.validate(true)?;
        if self.epsilon.is_empty() || self.epsilon.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(CliError::Config("epsilon must be a nonempty list of finite values >= 0".into()));
        }
        if self.folds < 2 {
            return Err(CliError::Config("folds must be >= 2".into()));
        }
        if self.m_samples == 0 {
            return Err(CliError::Config("m_samples must be >= 1".into()));
        }
        self.loss.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.solver.validate().map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Minimum radius and tolerance bounds for a posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TolerancesConfig {
    pub posterior: ConjugatePosterior,
    /// Condition `posterior` on the observations before computing anything.
    #[serde(default)]
    pub update: bool,
    #[serde(default)]
    pub observations: DataSource,
    #[serde(default)]
    pub truth: Option<StandardParams>,
    #[serde(default)]
    pub seed: u64,
}

impl TolerancesConfig {
    fn validate(&self) -> Result<(), CliError> {
        self.posterior.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.observations.validate(self.update)?;
        if let Some(t) = &self.truth {
            t.validate().map_err(|e| CliError::Config(format!("truth: {e}")))?;
            if t.family() != self.posterior.family() || t.dim() != self.posterior.dim() {
                return Err(CliError::Config("truth does not match the posterior family or dimension".into()));
            }
        }
        Ok(())
    }
}

fn default_one_m() -> usize {
    1000
}

/// A single solve at one radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveOneConfig {
    #[serde(default)]
    pub prior: Option<ConjugatePosterior>,
    #[serde(default)]
    pub observations: DataSource,
    pub method: Method,
    pub epsilon: f64,
    #[serde(default = "default_one_m")]
    pub m_samples: usize,
    #[serde(default = "default_loss")]
    pub loss: LossSpec,
    /// Defaults to the box [0, 100]^D.
    #[serde(default)]
    pub set: Option<FeasibleSet>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolveConfig,
}

impl SolveOneConfig {
    fn validate(&self) -> Result<(), CliError> {
        self.observations.validate(false)?;
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(CliError::Config(format!("epsilon must be finite and >= 0; got {}", self.epsilon)));
        }
        if self.m_samples == 0 {
            return Err(CliError::Config("m_samples must be >= 1".into()));
        }
        if self.prior.is_none() && self.observations == DataSource::default() {
            return Err(CliError::Config("give a prior, observations, or both".into()));
        }
        if matches!(self.method, Method::EmpiricalKl | Method::Wasserstein) && self.observations == DataSource::default() {
            return Err(CliError::Config(format!("{} needs observations", self.method)));
        }
        if let Some(s) = &self.set {
            s.validate().map_err(|e| CliError::Config(format!("set: {e}")))?;
        }
        self.loss.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.solver.validate().map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Set `path` (dot-separated; numeric segments index arrays) to `raw`,
/// parsed as JSON when possible and as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value; got '{assignment}'")))?;
    if path.is_empty() {
        return Err(CliError::Config("--set key is empty".into()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let segments: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        if cur.is_null() {
            *cur = Value::Object(Map::new());
        }
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(seg.to_string(), value);
                    return Ok(());
                }
                map.entry(seg.to_string()).or_insert(Value::Null)
            }
            Value::Array(arr) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| CliError::Config(format!("--set {path}: '{seg}' is not an array index")))?;
                let len = arr.len();
                let slot = arr
                    .get_mut(idx)
                    .ok_or_else(|| CliError::Config(format!("--set {path}: index {idx} out of range (length {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::Config(format!("--set {path}: '{seg}' is not inside an object or array"))),
        };
    }
    unreachable!("loop returns on the last segment")
}

/// Read the config file (or start from `{}`), apply overrides, tag the
/// experiment kind and parse.
pub fn load(
    path: Option<&Path>,
    kind: Option<&str>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<ExperimentConfig, CliError> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: invalid JSON: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !root.is_object() {
        return Err(CliError::Config("config must be a JSON object".into()));
    }
    for s in sets {
        apply_override(&mut root, s)?;
    }
    if let Some(seed) = seed {
        root["seed"] = Value::from(seed);
    }
    let obj = root.as_object_mut().expect("checked above");
    match (kind, obj.get("experiment").and_then(Value::as_str)) {
        (Some(k), Some(found)) if k != found => {
            return Err(CliError::Config(format!(
                "config is for experiment '{found}' but the subcommand is '{k}'"
            )))
        }
        (Some(k), None) => {
            obj.insert("experiment".into(), Value::from(k));
        }
        (None, None) => return Err(CliError::Config("missing field `experiment`".into())),
        _ => {}
    }
    parse(root)
}

/// Parse a tagged config. The tag is dispatched by hand so that errors inside
/// the payload keep their field path (serde's internally tagged enums buffer
/// the payload and lose it).
pub fn parse(mut root: Value) -> Result<ExperimentConfig, CliError> {
    let obj = root
        .as_object_mut()
        .ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
    let kind = match obj.remove("experiment") {
        Some(Value::String(s)) => s,
        Some(other) => return Err(CliError::Config(format!("experiment: expected a string, got {other}"))),
        None => return Err(CliError::Config("missing field `experiment`".into())),
    };
    let cfg = match kind.as_str() {
        "newsvendor" => ExperimentConfig::Newsvendor(typed(root)?),
        "portfolio" => ExperimentConfig::Portfolio(typed(root)?),
        "cv" => ExperimentConfig::Cv(typed(root)?),
        "tolerances" => ExperimentConfig::Tolerances(typed(root)?),
        "solve-one" => ExperimentConfig::SolveOne(typed(root)?),
        other => {
            return Err(CliError::Config(format!(
                "experiment: unknown kind '{other}' (expected newsvendor, portfolio, cv, tolerances or solve-one)"
            )))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn typed<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, CliError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            CliError::Config(e.into_inner().to_string())
        } else {
            CliError::Config(format!("{path}: {}", e.into_inner()))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides() {
        let mut v = json!({"solver": {"tol": 1e-8}, "epsilon": [0.1, 0.2]});
        apply_override(&mut v, "solver.max_iters=50").unwrap();
        apply_override(&mut v, "epsilon.1=0.5").unwrap();
        apply_override(&mut v, "dgp.kind=exponential").unwrap();
        apply_override(&mut v, "dgp.rate=0.05").unwrap();
        assert_eq!(
            v,
            json!({"solver": {"tol": 1e-8, "max_iters": 50}, "epsilon": [0.1, 0.5], "dgp": {"kind": "exponential", "rate": 0.05}})
        );
        assert!(apply_override(&mut v, "epsilon.7=1").is_err());
        assert!(apply_override(&mut v, "noequals").is_err());
        assert!(apply_override(&mut v, "solver.tol.x=1").is_err());
    }

    #[test]
    fn missing_epsilon_names_the_field() {
        let v = json!({
            "experiment": "newsvendor",
            "dgp": {"kind": "exponential", "rate": 0.05},
            "methods": ["DRO-BAS-PE"],
            "m_values": [10], "replicates": 1, "n_train": 5, "t_test": 5
        });
        let e = parse(v).unwrap_err();
        assert!(matches!(e, CliError::Config(_)));
        assert!(e.to_string().contains("epsilon"), "{e}");
    }

    #[test]
    fn nested_errors_carry_a_path() {
        let v = json!({
            "experiment": "newsvendor",
            "dgp": {"kind": "exponential", "rate": "fast"},
            "methods": ["DRO-BAS-PE"], "epsilon": [0.1],
            "m_values": [10], "replicates": 1, "n_train": 5, "t_test": 5
        });
        let e = parse(v).unwrap_err().to_string();
        // The DGP is itself internally tagged, so the path stops at the field.
        assert!(e.starts_with("dgp"), "{e}");
        let v = json!({
            "experiment": "newsvendor",
            "dgp": {"kind": "exponential", "rate": 0.05},
            "methods": ["DRO-BAS-PE"], "epsilon": [0.1, "x"],
            "m_values": [10], "replicates": 1, "n_train": 5, "t_test": 5
        });
        let e = parse(v).unwrap_err().to_string();
        assert!(e.starts_with("epsilon[1]"), "{e}");
    }

    #[test]
    fn round_trip_through_json() {
        let cfg = ExperimentConfig::Newsvendor(NewsvendorConfig::standard());
        let back = parse(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
