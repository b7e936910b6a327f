//! Configuration files.
//!
//! A config file is a single JSON object with flat dotted keys, e.g.
//!
//! ```json
//! { "servers": 10, "threshold_range.low": 40, "matrix.seeds": [1, 2, 3] }
//! ```
//!
//! Simulation constants sit at the top level; workload curve, periodic
//! scenario and experiment-matrix settings live under `workload.`,
//! `family_f.` and `matrix.`. Unknown keys are rejected.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::de::Deserializer;
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::behavior::ExpectationParams;
use crate::schedulers::{PasKey, StrategyId};
use crate::time::{parse_exact, Exact};
use crate::workloads::{CurveParams, FamilyFParams, Proposition, WorkloadKind, DAY_SECONDS};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config must be a JSON object with dotted keys")]
    NotAnObject,
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` is both a value and a prefix of another key")]
    KeyClash(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Which expectation model gets the tolerance margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginTarget {
    #[default]
    User,
    Provider,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdRange {
    pub low: f64,
    pub high: f64,
}

impl Default for ThresholdRange {
    fn default() -> Self {
        Self { low: 40.0, high: 60.0 }
    }
}

/// Simulation constants. Defaults are the published evaluation setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    #[serde(alias = "m")]
    pub servers: usize,
    pub rng_seed: u64,
    /// Window `b` of the tolerance mean when happiness dynamics are enabled.
    pub history_window: usize,
    pub ewma_alpha: f64,
    pub ewma_window: usize,
    pub outlier_window: usize,
    pub outlier_cutoff: f64,
    pub tolerance_margin: f64,
    pub margin_applies_to: MarginTarget,
    pub think_time_max: f64,
    pub job_length: f64,
    pub threshold_range: ThresholdRange,
    pub provider_max_rt: f64,
    pub penalty_rt: f64,
    pub patience_zero_cutoff: f64,
    pub horizon: f64,
    pub happiness_enabled: bool,
    pub initial_happiness: f64,
    pub critical_level: f64,
    pub cancel_queued_on_abandon: bool,
    pub pas_key: PasKey,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            servers: 10,
            rng_seed: 1,
            history_window: 5,
            ewma_alpha: 0.8,
            ewma_window: 20,
            outlier_window: 4,
            outlier_cutoff: 0.3,
            tolerance_margin: 0.2,
            margin_applies_to: MarginTarget::User,
            think_time_max: 100.0,
            job_length: 10.0,
            threshold_range: ThresholdRange::default(),
            provider_max_rt: 60.0,
            penalty_rt: 40.0,
            patience_zero_cutoff: 0.5,
            horizon: DAY_SECONDS,
            happiness_enabled: false,
            initial_happiness: 1.0,
            critical_level: 0.5,
            cancel_queued_on_abandon: false,
            pas_key: PasKey::Dynamic,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if self.servers == 0 {
            return bad("servers must be ≥ 1");
        }
        if !(self.job_length > 0.0) || !(self.horizon > 0.0) {
            return bad("job_length and horizon must be positive");
        }
        if !(self.think_time_max >= 0.0) {
            return bad("think_time_max must be non-negative");
        }
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            return bad("ewma_alpha must lie in (0, 1]");
        }
        if self.ewma_window == 0 || self.outlier_window == 0 {
            return bad("ewma_window and outlier_window must be ≥ 1");
        }
        if self.history_window < 2 {
            return bad("history_window must be ≥ 2");
        }
        if !(0.0..1.0).contains(&self.outlier_cutoff) {
            return bad("outlier_cutoff must lie in [0, 1)");
        }
        if !(self.tolerance_margin >= 0.0) {
            return bad("tolerance_margin must be non-negative");
        }
        let r = self.threshold_range;
        if !(r.low > 0.0 && r.low <= r.high) {
            return bad("threshold_range needs 0 < low ≤ high");
        }
        if !(self.provider_max_rt > 0.0 && self.penalty_rt > 0.0) {
            return bad("provider_max_rt and penalty_rt must be positive");
        }
        if !(self.patience_zero_cutoff > 0.0 && self.patience_zero_cutoff < 1.0) {
            return bad("patience_zero_cutoff must lie in (0, 1)");
        }
        let (h0, c) = (self.initial_happiness, self.critical_level);
        if !((0.0..=1.0).contains(&h0) && (0.0..=1.0).contains(&c)) {
            return bad("initial_happiness and critical_level must lie in [0, 1]");
        }
        Ok(())
    }

    fn expectation(&self, margin: bool) -> ExpectationParams {
        ExpectationParams {
            alpha: self.ewma_alpha,
            ewma_window: self.ewma_window,
            outlier_window: self.outlier_window,
            outlier_cutoff: self.outlier_cutoff,
            margin: if margin { self.tolerance_margin } else { 0.0 },
        }
    }

    pub fn user_expectation(&self) -> ExpectationParams {
        self.expectation(matches!(self.margin_applies_to, MarginTarget::User | MarginTarget::Both))
    }

    pub fn provider_expectation(&self) -> ExpectationParams {
        self.expectation(matches!(self.margin_applies_to, MarginTarget::Provider | MarginTarget::Both))
    }
}

/// Exact number in a config file: an integer, a decimal, or a `"n/d"` string.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactValue(pub Exact);

impl fmt::Display for ExactValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for ExactValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_integer() {
            s.serialize_i64(*self.0.numer())
        } else {
            s.serialize_str(&self.0.to_string())
        }
    }
}

impl<'de> Deserialize<'de> for ExactValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        let text = match &v {
            Value::Number(n) => n.to_string(),
            Value::String(s) => s.clone(),
            _ => return Err(serde::de::Error::custom("expected a number or \"n/d\" string")),
        };
        parse_exact(&text)
            .map(ExactValue)
            .ok_or_else(|| serde::de::Error::custom(format!("`{text}` is not an exact number")))
    }
}

/// Parameters of the periodic verification scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyFSettings {
    pub proposition: u8,
    pub m: usize,
    pub delta: ExactValue,
    pub epsilon: ExactValue,
    pub b: usize,
    /// Defaults to `b + 2`.
    pub periods: Option<usize>,
    pub h0: ExactValue,
    pub critical: ExactValue,
}

impl Default for FamilyFSettings {
    fn default() -> Self {
        Self {
            proposition: 2,
            m: 2,
            delta: ExactValue(Exact::from_integer(10)),
            epsilon: ExactValue(Exact::from_integer(6)),
            b: 5,
            periods: None,
            h0: ExactValue(Exact::from_integer(1)),
            critical: ExactValue(Exact::new(1, 2)),
        }
    }
}

impl FamilyFSettings {
    pub fn params(&self) -> FamilyFParams<Exact> {
        FamilyFParams {
            m: self.m,
            delta: self.delta.0,
            epsilon: self.epsilon.0,
            b: self.b,
            periods: self.periods.unwrap_or(self.b + 2),
            h0: self.h0.0,
            critical: self.critical.0,
        }
    }

    pub fn proposition(&self) -> Result<Proposition, ConfigError> {
        Proposition::from_number(self.proposition).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

/// Axes of the experiment matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSettings {
    pub strategies: Vec<StrategyId>,
    pub workloads: Vec<WorkloadKind>,
    pub resources: Vec<usize>,
    pub seeds: Vec<u64>,
    pub workers: usize,
    /// Write one per-request CSV per cell.
    pub write_requests: bool,
    pub histogram_bins: usize,
}

impl Default for MatrixSettings {
    fn default() -> Self {
        Self {
            strategies: StrategyId::ALL.to_vec(),
            workloads: WorkloadKind::DAILY.to_vec(),
            resources: (4..=20).step_by(2).collect(),
            seeds: vec![1, 2, 3],
            workers: 1,
            write_requests: true,
            histogram_bins: 20,
        }
    }
}

impl MatrixSettings {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.strategies.is_empty() || self.workloads.is_empty() || self.resources.is_empty() || self.seeds.is_empty() {
            return Err(ConfigError::Invalid("every matrix axis needs at least one entry".into()));
        }
        if self.resources.contains(&0) {
            return Err(ConfigError::Invalid("resource counts must be ≥ 1".into()));
        }
        if self.workloads.contains(&WorkloadKind::FamilyF) {
            return Err(ConfigError::Invalid("family-f runs through `verify`, not the daily matrix".into()));
        }
        if self.histogram_bins == 0 {
            return Err(ConfigError::Invalid("histogram_bins must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Everything a run needs, as resolved from defaults, file and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub sim: SimConfig,
    pub workload: CurveParams,
    pub family_f: FamilyFSettings,
    pub matrix: MatrixSettings,
}

impl ExperimentConfig {
    pub fn from_flat_json(text: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text)?;
        let Value::Object(flat) = value else {
            return Err(ConfigError::NotAnObject);
        };
        let nested = unflatten(&flat)?;
        let config: ExperimentConfig = serde_json::from_value(Value::Object(nested))?;
        let known: BTreeSet<String> = config.to_flat().keys().cloned().collect();
        for key in flat.keys() {
            let canonical = if key == "m" { "servers" } else { key.as_str() };
            if !known.contains(canonical) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_flat_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sim.validate()?;
        self.matrix.validate()
    }

    /// The configuration as flat dotted keys, sorted.
    pub fn to_flat(&self) -> Map<String, Value> {
        let value = serde_json::to_value(self).expect("config serialises");
        let mut out = Map::new();
        flatten_into("", &value, &mut out);
        out
    }

    /// Single-line JSON echo of the resolved configuration.
    pub fn echo(&self) -> String {
        serde_json::to_string(&Value::Object(self.to_flat())).expect("config serialises")
    }
}

fn flatten_into(prefix: &str, value: &Value, out: &mut Map<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &Map<String, Value>) -> Result<Map<String, Value>, ConfigError> {
    let mut root = Map::new();
    for (key, value) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            let entry = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            node = match entry {
                Value::Object(m) => m,
                _ => return Err(ConfigError::KeyClash(key.clone())),
            };
        }
        let leaf = parts[parts.len() - 1].to_string();
        if node.insert(leaf, value.clone()).is_some() {
            return Err(ConfigError::KeyClash(key.clone()));
        }
    }
    Ok(root)
}
