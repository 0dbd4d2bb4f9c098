//! Run configuration: flat dotted keys read from TOML, with `--set`
//! overrides, checked against a fixed table of known keys and defaults.
//!
//! Nested tables and dotted keys are equivalent: `[amp] max_iter = 80` and
//! `amp.max_iter = 80` name the same setting.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::json;
use toml::Value;

use crate::amp::AmpConfig;
use crate::error::{HvmpError, Result};
use crate::harness::metrics::AmbiguityMode;
use crate::hvmp::{EngineConfig, PosteriorPath, StopRule, VarianceMode};
use crate::linalg::c;
use crate::linops::OperatorScope;
use crate::priors::Prior;

/// Known keys with their default values. The type of each default fixes
/// the accepted type of the key.
pub fn defaults() -> BTreeMap<String, Value> {
    let floats = |v: &[f64]| Value::Array(v.iter().map(|&x| Value::Float(x)).collect());
    let ints = |v: &[i64]| Value::Array(v.iter().map(|&x| Value::Integer(x)).collect());
    let s = |x: &str| Value::String(x.into());
    [
        ("l", Value::Integer(64)),
        ("k", Value::Integer(25)),
        ("t", Value::Integer(50)),
        ("n", Value::Integer(128)),
        ("rho", Value::Float(0.2)),
        ("snr_db", Value::Float(20.0)),
        ("t_max", Value::Integer(100)),
        ("seed", Value::Integer(1)),
        ("trials", Value::Integer(10)),
        ("operator.kind", s("partial_dft")),
        ("operator.scope", s("per_column")),
        ("prior_s.kind", s("bernoulli_gaussian")),
        ("prior_s.variance", Value::Float(1.0)),
        ("prior_x.kind", s("gaussian")),
        ("prior_x.rho", Value::Float(1.0)),
        ("prior_x.variance", Value::Float(1.0)),
        ("prior_x.mean_re", Value::Float(0.0)),
        ("prior_x.mean_im", Value::Float(0.0)),
        ("stop.rel_tol", Value::Float(0.0)),
        ("lmmse.variance_mode", s("posterior")),
        ("engine.posterior_path", s("auto")),
        ("engine.damping", Value::Float(1.0)),
        ("amp.max_iter", Value::Integer(50)),
        ("amp.damping", Value::Float(0.7)),
        ("amp.tol", Value::Float(1e-8)),
        ("metric.x_mode", s("perm-row-scale")),
        ("metric.s_mode", s("perm-col-scale")),
        ("sweep.rho_grid", floats(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])),
        ("sweep.k_grid", ints(&[5, 10, 15, 20, 25, 30])),
        ("bench.k_grid", ints(&[8, 12, 16, 20])),
        ("bench.target_db", Value::Float(-20.0)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Coerces `value` to the type of `default`; integers are accepted where
/// floats are expected.
fn coerce(key: &str, value: Value, default: &Value) -> Result<Value> {
    let bad = |v: &Value| {
        HvmpError::Config(format!(
            "key `{key}` expects {}, got {}",
            default.type_str(),
            v.type_str()
        ))
    };
    match (default, value) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Array(d), Value::Array(items)) => {
            let proto = d.first().cloned().unwrap_or(Value::Float(0.0));
            items
                .into_iter()
                .map(|v| coerce(key, v, &proto))
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
        (d, v) if std::mem::discriminant(d) == std::mem::discriminant(&v) => Ok(v),
        (_, v) => Err(bad(&v)),
    }
}

/// The flat key/value map after files and overrides have been applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigMap {
    values: BTreeMap<String, Value>,
}

impl Default for ConfigMap {
    fn default() -> Self {
        ConfigMap { values: defaults() }
    }
}

impl ConfigMap {
    /// Merges a TOML document; `origin` names it in error messages.
    pub fn merge_toml(&mut self, text: &str, origin: &str) -> Result<()> {
        let table: toml::Table = toml::from_str(text).map_err(|e| HvmpError::Config(format!("{origin}: {e}")))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        for (key, value) in flat {
            self.set_value(&key, value).map_err(|e| match e {
                HvmpError::Config(m) => HvmpError::Config(format!("{origin}: {m}")),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|source| HvmpError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.merge_toml(&text, &path.display().to_string())
    }

    fn set_value(&mut self, key: &str, value: Value) -> Result<()> {
        let default = self
            .values
            .get(key)
            .ok_or_else(|| HvmpError::Config(format!("unknown key `{key}`")))?;
        let v = coerce(key, value, default)?;
        self.values.insert(key.to_string(), v);
        Ok(())
    }

    /// Applies `key=value`. The value is read as a TOML literal, falling
    /// back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| HvmpError::Config(format!("override `{assignment}` is not KEY=VALUE")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.set_value(key, value)
    }

    pub fn get(&self, key: &str) -> &Value {
        &self.values[key]
    }

    fn usize(&self, key: &str) -> Result<usize> {
        match self.get(key) {
            Value::Integer(i) if *i >= 0 => Ok(*i as usize),
            v => Err(HvmpError::Config(format!(
                "key `{key}` must be a non-negative integer, got {v}"
            ))),
        }
    }

    fn u64(&self, key: &str) -> Result<u64> {
        match self.get(key) {
            Value::Integer(i) if *i >= 0 => Ok(*i as u64),
            v => Err(HvmpError::Config(format!(
                "key `{key}` must be a non-negative integer, got {v}"
            ))),
        }
    }

    fn f64(&self, key: &str) -> f64 {
        self.get(key).as_float().expect("float keys are coerced on insert")
    }

    fn str(&self, key: &str) -> &str {
        self.get(key).as_str().expect("string keys are checked on insert")
    }

    fn f64_list(&self, key: &str) -> Vec<f64> {
        self.get(key)
            .as_array()
            .map(|a| a.iter().filter_map(Value::as_float).collect())
            .unwrap_or_default()
    }

    fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)
            .as_array()
            .map(|a| a.to_vec())
            .unwrap_or_default()
            .into_iter()
            .map(|v| match v {
                Value::Integer(i) if i > 0 => Ok(i as usize),
                v => Err(HvmpError::Config(format!(
                    "`{key}` entries must be positive integers, got {v}"
                ))),
            })
            .collect()
    }

    /// Every key with its effective value, for output provenance.
    pub fn echo(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> =
            self.values.iter().map(|(k, v)| (k.clone(), toml_to_json(v))).collect();
        serde_json::Value::Object(map)
    }

    pub fn to_run_config(&self) -> Result<RunConfig> {
        let enum_of = |key: &str| -> Result<String> { Ok(self.str(key).to_string()) };
        let variance_mode = match self.str("lmmse.variance_mode") {
            "posterior" => VarianceMode::Posterior,
            "literal" => VarianceMode::Literal,
            other => {
                return Err(HvmpError::Config(format!(
                    "lmmse.variance_mode: unknown value `{other}`"
                )))
            }
        };
        let posterior_path = match self.str("engine.posterior_path") {
            "auto" => PosteriorPath::Auto,
            "whitened" => PosteriorPath::Whitened,
            other => {
                return Err(HvmpError::Config(format!(
                    "engine.posterior_path: unknown value `{other}`"
                )))
            }
        };
        let scope = match self.str("operator.scope") {
            "per_column" => OperatorScope::PerColumn,
            "global" => OperatorScope::Global,
            other => return Err(HvmpError::Config(format!("operator.scope: unknown value `{other}`"))),
        };
        let prior_x = match self.str("prior_x.kind") {
            "gaussian" => Prior::gaussian(
                c(self.f64("prior_x.mean_re"), self.f64("prior_x.mean_im")),
                self.f64("prior_x.variance"),
            ),
            "bernoulli_gaussian" => Prior::bernoulli_gaussian(self.f64("prior_x.rho"), self.f64("prior_x.variance")),
            other => return Err(HvmpError::Config(format!("prior_x.kind: unknown value `{other}`"))),
        }
        .map_err(|e| HvmpError::Config(format!("prior_x: {e}")))?;
        let prior_s_kind = enum_of("prior_s.kind")?;
        if prior_s_kind != "bernoulli_gaussian" && prior_s_kind != "gaussian" {
            return Err(HvmpError::Config(format!(
                "prior_s.kind: unknown value `{prior_s_kind}`"
            )));
        }
        let cfg = RunConfig {
            l: self.usize("l")?,
            k: self.usize("k")?,
            t: self.usize("t")?,
            n: self.usize("n")?,
            rho: self.f64("rho"),
            snr_db: self.f64("snr_db"),
            t_max: self.usize("t_max")?,
            seed: self.u64("seed")?,
            trials: self.usize("trials")?,
            operator_kind: enum_of("operator.kind")?,
            operator_scope: scope,
            prior_s_kind,
            prior_s_variance: self.f64("prior_s.variance"),
            prior_x,
            stop_rel_tol: self.f64("stop.rel_tol"),
            engine: EngineConfig {
                variance_mode,
                posterior_path,
                amp: AmpConfig {
                    max_iter: self.usize("amp.max_iter")?,
                    damping: self.f64("amp.damping"),
                    tol: self.f64("amp.tol"),
                },
                damping: self.f64("engine.damping"),
                lmmse_path: None,
            },
            x_mode: self.str("metric.x_mode").parse()?,
            s_mode: self.str("metric.s_mode").parse()?,
            rho_grid: self.f64_list("sweep.rho_grid"),
            k_grid: self.usize_list("sweep.k_grid")?,
            bench_k_grid: self.usize_list("bench.k_grid")?,
            bench_target_db: self.f64("bench.target_db"),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn toml_to_json(v: &Value) -> serde_json::Value {
    match v {
        Value::String(s) => json!(s),
        Value::Integer(i) => json!(i),
        Value::Float(f) => json!(f),
        Value::Boolean(b) => json!(b),
        Value::Array(a) => serde_json::Value::Array(a.iter().map(toml_to_json).collect()),
        other => json!(other.to_string()),
    }
}

/// Typed view of a validated [`ConfigMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub l: usize,
    pub k: usize,
    pub t: usize,
    /// Rows per column of `W` for a per-column operator, total rows for a
    /// global one.
    pub n: usize,
    pub rho: f64,
    pub snr_db: f64,
    pub t_max: usize,
    pub seed: u64,
    pub trials: usize,
    pub operator_kind: String,
    pub operator_scope: OperatorScope,
    pub prior_s_kind: String,
    pub prior_s_variance: f64,
    pub prior_x: Prior,
    pub stop_rel_tol: f64,
    pub engine: EngineConfig,
    pub x_mode: AmbiguityMode,
    pub s_mode: AmbiguityMode,
    pub rho_grid: Vec<f64>,
    pub k_grid: Vec<usize>,
    pub bench_k_grid: Vec<usize>,
    pub bench_target_db: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        ConfigMap::default().to_run_config().expect("defaults are valid")
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HvmpError::Config(m));
        for (name, v) in [
            ("l", self.l),
            ("k", self.k),
            ("t", self.t),
            ("n", self.n),
            ("trials", self.trials),
        ] {
            if v == 0 {
                return err(format!("`{name}` must be at least 1"));
            }
        }
        if self.t_max == 0 {
            return err("`t_max` must be at least 1".into());
        }
        if !self.snr_db.is_finite() {
            return err(format!("`snr_db` must be finite, got {}", self.snr_db));
        }
        if self.operator_kind != "partial_dft" {
            return err(format!("operator.kind: unsupported `{}`", self.operator_kind));
        }
        if !(self.stop_rel_tol >= 0.0) {
            return err("`stop.rel_tol` must be non-negative".into());
        }
        self.prior_s()?;
        for &rho in &self.rho_grid {
            if !(0.0..=1.0).contains(&rho) {
                return err(format!("sweep.rho_grid entry {rho} outside [0, 1]"));
            }
        }
        self.engine.validate()
    }

    pub fn prior_s(&self) -> Result<Prior> {
        match self.prior_s_kind.as_str() {
            "gaussian" => Prior::gaussian(c(0.0, 0.0), self.prior_s_variance),
            _ => Prior::bernoulli_gaussian(self.rho, self.prior_s_variance),
        }
        .map_err(|e| HvmpError::Config(format!("prior_s: {e}")))
    }

    pub fn stop_rule(&self) -> Option<StopRule> {
        (self.stop_rel_tol > 0.0).then_some(StopRule {
            rel_tol: self.stop_rel_tol,
        })
    }

    /// Total number of measurements.
    pub fn total_n(&self) -> usize {
        match self.operator_scope {
            OperatorScope::PerColumn => self.n * self.t,
            OperatorScope::Global => self.n,
        }
    }
}
