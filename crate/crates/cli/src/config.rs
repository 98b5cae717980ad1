//! Flat `key = value` run configuration.

use std::collections::BTreeMap;

use mstgcn::data::{builtin_layout, load_electrode_layout, synthetic_channel_names, synthetic_layout};
use mstgcn::domain::GrlConfig;
use mstgcn::features::FeatureNetConfig;
use mstgcn::graph::{AdjacencyKind, ElectrodeLayout, SigmaMode};
use mstgcn::params::OptimizerKind;
use mstgcn::stgcn::{FcSource, ModelConfig};
use mstgcn::train::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {msg}")]
    Value { key: String, value: String, msg: String },
    #[error("layout: {0}")]
    Layout(String),
}

/// Every accepted key with its default, in the order written to
/// `effective.cfg`.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("epochs", "50"),
    ("batch_size", "32"),
    ("lr", "0.001"),
    ("optimizer", "adam"),
    ("patience", "10"),
    ("validation_subjects", ""),
    ("beta", "0.1"),
    ("warmup_epochs", "10"),
    ("mu", "0.0001"),
    ("feature_net", "standard"),
    ("context", "2"),
    ("cheb_k", "3"),
    ("layers", "1"),
    ("cheb_filters", "10"),
    ("time_filters", "10"),
    ("time_kernel", "3"),
    ("fc_source", "learned"),
    ("graph_lambda", "0.001"),
    ("head_hidden", "0"),
    ("sigma", "mean"),
    ("layout", "auto"),
    ("folds", "5"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    /// Defaults overlaid with the file's entries. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, msg: format!("expected key = value, got {line:?}") })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                ConfigError::UnknownKey(k) => ConfigError::Syntax { line: i + 1, msg: format!("unknown key {k:?}") },
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(ConfigError::UnknownKey(key.to_string())),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: 0, msg: format!("override {assignment:?} is not key=value") })?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[key]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            out.push_str(&format!("{k} = {}\n", self.values[*k]));
        }
        out
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.parse::<T>().map_err(|e| ConfigError::Value { key: key.into(), value: v.into(), msg: e.to_string() })
    }

    fn bad(&self, key: &str, msg: &str) -> ConfigError {
        ConfigError::Value { key: key.into(), value: self.get(key).into(), msg: msg.into() }
    }

    /// Comma-separated subject ids.
    pub fn subject_list(&self, key: &str) -> Result<Vec<u32>, ConfigError> {
        parse_list(self.get(key)).map_err(|msg| self.bad(key, &msg))
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let features = match self.get("feature_net") {
            "standard" => FeatureNetConfig::standard(),
            "shortened" => FeatureNetConfig::shortened(),
            _ => return Err(self.bad("feature_net", "expected standard or shortened")),
        };
        let fc_source = match self.get("fc_source") {
            "learned" => FcSource::Learned,
            "full" => FcSource::Fixed(AdjacencyKind::Full),
            "knn" => FcSource::Fixed(AdjacencyKind::Knn),
            "pcc" => FcSource::Fixed(AdjacencyKind::Pcc),
            "plv" => FcSource::Fixed(AdjacencyKind::Plv),
            "mi" => FcSource::Fixed(AdjacencyKind::Mi),
            _ => return Err(self.bad("fc_source", "expected learned, full, knn, pcc, plv or mi")),
        };
        let optimizer = match self.get("optimizer") {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            _ => return Err(self.bad("optimizer", "expected adam or sgd")),
        };
        let sigma = match self.get("sigma") {
            "mean" => SigmaMode::MeanDistance,
            _ => SigmaMode::Explicit(self.parsed("sigma")?),
        };
        let hidden: usize = self.parsed("head_hidden")?;
        let cfg = TrainConfig {
            model: ModelConfig {
                features,
                context: self.parsed("context")?,
                cheb_k: self.parsed("cheb_k")?,
                layers: self.parsed("layers")?,
                cheb_filters: self.parsed("cheb_filters")?,
                time_filters: self.parsed("time_filters")?,
                time_kernel: self.parsed("time_kernel")?,
                fc_source,
                graph_lambda: self.parsed("graph_lambda")?,
                head_hidden: (hidden > 0).then_some(hidden),
                num_domains: 0,
            },
            learning_rate: self.parsed("lr")?,
            epochs: self.parsed("epochs")?,
            batch_size: self.parsed("batch_size")?,
            seed: self.parsed("seed")?,
            patience: self.parsed("patience")?,
            grl: GrlConfig { beta: self.parsed("beta")?, warmup_epochs: self.parsed("warmup_epochs")? },
            mu: self.parsed("mu")?,
            optimizer,
            sigma,
        };
        cfg.validate().map_err(|e| ConfigError::Value { key: "config".into(), value: String::new(), msg: e.to_string() })?;
        self.subject_list("validation_subjects")?;
        let folds: usize = self.parsed("folds")?;
        if folds < 2 {
            return Err(self.bad("folds", "need at least 2 folds"));
        }
        Ok(cfg)
    }

    /// Electrode layout for the given channels. `auto` matches generated
    /// channel names first, then the builtin scalp layout.
    pub fn layout(&self, channels: &[String]) -> Result<ElectrodeLayout, ConfigError> {
        let spec = self.get("layout");
        let full = match spec {
            "auto" => {
                if channels == synthetic_channel_names(channels.len()).as_slice() {
                    synthetic_layout(channels.len())
                } else {
                    builtin_layout("isruc6").map_err(|e| ConfigError::Layout(e.to_string()))?
                }
            }
            s if s == "isruc6" || s.starts_with("grid") => {
                builtin_layout(s).map_err(|e| ConfigError::Layout(e.to_string()))?
            }
            path => load_electrode_layout(std::path::Path::new(path)).map_err(|e| ConfigError::Layout(e.to_string()))?,
        };
        full.subset(channels).map_err(|e| ConfigError::Layout(e.to_string()))
    }
}

pub fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}
