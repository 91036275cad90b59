//! Run configuration: one TOML document, optionally patched by
//! `key.path=value` overrides, validated before anything runs.

use hrmas::data::SyntheticSpec;
use hrmas::grad::OptimState;
use hrmas::ip::{IpConfig, IpError};
use hrmas::network::{LayerKind, LayerSpec, NetworkConfig};
use hrmas::search::{RetrainConfig, SearchConfig, SearchError};
use hrmas::verify::GradCheckConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected key=value")]
    Override(String),
    #[error("{key}: {msg}")]
    Invalid { key: String, msg: String },
}

fn invalid(key: impl Into<String>, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Event file to load; when unset the synthetic task is generated.
    pub events: Option<PathBuf>,
    /// Train, validation and test fractions.
    pub ratios: [f64; 3],
    pub split_seed: u64,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            events: None,
            ratios: [0.6, 0.2, 0.2],
            split_seed: 7,
            synthetic: SyntheticSpec {
                seed: 7,
                ..SyntheticSpec::default()
            },
        }
    }
}

/// Settings of the `gradcheck` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub samples_per_group: usize,
    /// Training examples in the checked batch.
    pub examples: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        let d = GradCheckConfig::default();
        Self {
            epsilon: d.epsilon,
            tolerance: d.tolerance,
            floor: d.floor,
            samples_per_group: d.samples_per_group,
            examples: 2,
        }
    }
}

impl GradcheckSection {
    pub fn to_config(&self, seed: u64) -> GradCheckConfig {
        GradCheckConfig {
            epsilon: self.epsilon,
            tolerance: self.tolerance,
            floor: self.floor,
            samples_per_group: self.samples_per_group,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the search (weight initialization and batch order).
    pub seed: u64,
    /// Seeds of the final retraining runs.
    pub retrain_seeds: Vec<u64>,
    pub network: NetworkConfig,
    pub ip: IpConfig,
    pub optim: OptimState,
    pub search: SearchConfig,
    pub retrain: RetrainConfig,
    pub gradcheck: GradcheckSection,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            retrain_seeds: vec![1, 2, 3, 4, 5],
            network: NetworkConfig {
                input_size: 16,
                horizon: 50,
                classes: 4,
                hidden: vec![LayerSpec {
                    size: 16,
                    kind: LayerKind::ScMl {
                        motif_sizes: vec![2, 4, 8],
                    },
                }],
                neuron: Default::default(),
                w_inh: 1.0,
                ff_init_gain: 3.0,
                rec_init_gain: 0.3,
                ablation: Default::default(),
            },
            ip: IpConfig::default(),
            optim: OptimState::default(),
            search: SearchConfig::default(),
            retrain: RetrainConfig::default(),
            gradcheck: GradcheckSection::default(),
            data: DataConfig::default(),
        }
    }
}

fn parse_value(text: &str) -> toml::Value {
    match format!("v = {text}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

/// Set `path` (dot-separated; numeric segments index arrays) to `value`.
fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(invalid(key, "empty path segment"));
    }
    let mut node = root;
    for (depth, part) in parts.iter().enumerate() {
        let last = depth + 1 == parts.len();
        node = match node {
            toml::Value::Table(t) => {
                if last {
                    t.insert(part.to_string(), value);
                    return Ok(());
                }
                t.entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| invalid(key, format!("`{part}` indexes an array and must be a number")))?;
                let len = a.len();
                let slot = a
                    .get_mut(i)
                    .ok_or_else(|| invalid(key, format!("index {i} out of range for {len} entries")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(invalid(key, format!("`{part}` is inside a scalar value"))),
        };
    }
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file (if any), then each `key=value` override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                toml::Value::Table(text.parse::<toml::Table>().map_err(|e| ConfigError::Parse(e.to_string()))?)
            }
            None => toml::Value::try_from(RunConfig::default()).map_err(|e| ConfigError::Parse(e.to_string()))?,
        };
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            set_path(&mut root, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = &self.network;
        for (key, v) in [
            ("network.input_size", n.input_size),
            ("network.horizon", n.horizon),
            ("network.classes", n.classes),
        ] {
            if v == 0 {
                return Err(invalid(key, "must be positive"));
            }
        }
        for (i, layer) in n.hidden.iter().enumerate() {
            if layer.size == 0 {
                return Err(invalid(format!("network.hidden.{i}.size"), "must be positive"));
            }
            if let LayerKind::ScMl { motif_sizes } = &layer.kind {
                if motif_sizes.is_empty() {
                    return Err(invalid(format!("network.hidden.{i}.motif_sizes"), "must not be empty"));
                }
                if motif_sizes.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(invalid(format!("network.hidden.{i}.motif_sizes"), "must be strictly increasing"));
                }
                if let Some(v) = motif_sizes.iter().find(|&&v| v == 0 || layer.size % v != 0) {
                    return Err(invalid(
                        format!("network.hidden.{i}.motif_sizes"),
                        format!("motif size {v} does not divide layer size {}", layer.size),
                    ));
                }
            }
        }
        let nd = &n.neuron;
        nd.intrinsics()
            .validate()
            .map_err(|e| invalid("network.neuron", e.to_string()))?;
        if !(nd.kappa > 0.0) {
            return Err(invalid("network.neuron.kappa", "must be positive"));
        }
        if !(nd.surrogate_width > 0.0) {
            return Err(invalid("network.neuron.surrogate_width", "must be positive"));
        }
        if !(n.w_inh >= 0.0) || !n.w_inh.is_finite() {
            return Err(invalid("network.w_inh", "must be finite and non-negative"));
        }
        self.ip.validate().map_err(|e| match e {
            IpError::InvalidConfig { key, msg } => invalid(format!("ip.{key}"), msg),
            other => invalid("ip", other.to_string()),
        })?;
        if !(self.optim.lr_arch >= 0.0) || !(self.optim.lr_weights >= 0.0) {
            return Err(invalid("optim", "learning rates must be non-negative"));
        }
        if !(self.optim.clip > 0.0) {
            return Err(invalid("optim.clip", "must be positive"));
        }
        self.search.validate().map_err(|e| match e {
            SearchError::InvalidConfig { key, msg } => invalid(format!("search.{key}"), msg),
            other => invalid("search", other.to_string()),
        })?;
        if self.retrain.batch_size == 0 {
            return Err(invalid("retrain.batch_size", "must be positive"));
        }
        if !(self.retrain.lr >= 0.0) || !(self.retrain.clip > 0.0) {
            return Err(invalid("retrain", "lr must be non-negative and clip positive"));
        }
        let g = &self.gradcheck;
        for (key, v) in [("gradcheck.epsilon", g.epsilon), ("gradcheck.tolerance", g.tolerance)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(key, "must be finite and positive"));
            }
        }
        if !(g.floor >= 0.0) {
            return Err(invalid("gradcheck.floor", "must be non-negative"));
        }
        if g.samples_per_group == 0 || g.examples == 0 {
            return Err(invalid("gradcheck", "samples_per_group and examples must be positive"));
        }
        if self.retrain_seeds.is_empty() {
            return Err(invalid("retrain_seeds", "must list at least one seed"));
        }
        let r = self.data.ratios;
        if r.iter().any(|x| !(*x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("data.ratios", "must be non-negative and sum to 1"));
        }
        if self.data.events.is_none() {
            let s = &self.data.synthetic;
            for (key, a, b) in [
                ("data.synthetic.input_size", s.input_size, n.input_size),
                ("data.synthetic.horizon", s.horizon, n.horizon),
                ("data.synthetic.classes", s.classes, n.classes),
            ] {
                if a != b {
                    return Err(invalid(key, format!("is {a} but the network expects {b}")));
                }
            }
        }
        hrmas::network::Network::new(n.clone()).map_err(|e| invalid("network", e.to_string()))?;
        Ok(())
    }
}
