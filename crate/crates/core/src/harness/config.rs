//! Run configuration, loaded from TOML or JSON (or a previous run's manifest).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::DatasetSpec;
use crate::metrics::{Binning, DEFAULT_BINS};
use crate::networks::Link;
use crate::optim::AdamConfig;
use crate::regularizers::PriorSpec;
use crate::vi::DEFAULT_LOG_STD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vifo,
    Vi,
    Base,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vifo => "vifo",
            Method::Vi => "vi",
            Method::Base => "base",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub link: Link,
    #[serde(default)]
    pub noise_link: Link,
    #[serde(default = "default_true")]
    pub shared_trunk: bool,
    #[serde(default = "default_one")]
    pub init_variance: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            link: Link::default(),
            noise_link: Link::default(),
            shared_trunk: true,
            init_variance: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_m_values")]
    pub m_values: Vec<usize>,
    #[serde(default = "default_bench_epochs")]
    pub epochs: usize,
    #[serde(default = "default_one_usize")]
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { m_values: default_m_values(), epochs: default_bench_epochs(), warmup: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_eta")]
    pub eta_aux: f64,
    #[serde(default = "default_m_train")]
    pub m_train: usize,
    #[serde(default = "default_m_eval")]
    pub m_eval: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    /// Clip gradients to a global L2 norm of `clip_norm`.
    #[serde(default = "default_true")]
    pub clip_grad: bool,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    /// Fraction of rows held out for evaluation; 0 trains on everything.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub network: NetworkConfig,
    pub data: DatasetSpec,
    #[serde(default)]
    pub ood: Option<DatasetSpec>,
    #[serde(default = "default_vi_prior_var")]
    pub vi_prior_var: f64,
    #[serde(default = "default_vi_log_std")]
    pub vi_log_std_init: f64,
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    #[serde(default)]
    pub binning: Binning,
    /// Reuse one evaluation noise stream across ensemble members.
    #[serde(default)]
    pub common_random_numbers: bool,
    #[serde(default)]
    pub bench: BenchConfig,
}

fn default_hidden() -> Vec<usize> {
    vec![50, 50]
}
fn default_true() -> bool {
    true
}
fn default_one() -> f64 {
    1.0
}
fn default_one_usize() -> usize {
    1
}
fn default_m_values() -> Vec<usize> {
    vec![1, 5, 10, 20]
}
fn default_bench_epochs() -> usize {
    5
}
fn default_eta() -> f64 {
    0.1
}
fn default_m_train() -> usize {
    10
}
fn default_m_eval() -> usize {
    100
}
fn default_clip() -> f64 {
    10.0
}
fn default_epochs() -> usize {
    200
}
fn default_batch_size() -> usize {
    64
}
fn default_ensemble_size() -> usize {
    5
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_vi_prior_var() -> f64 {
    0.05
}
fn default_vi_log_std() -> f64 {
    DEFAULT_LOG_STD
}
fn default_bins() -> usize {
    DEFAULT_BINS
}

fn field(name: &str, msg: impl Into<String>) -> HarnessError {
    HarnessError::Config { field: name.to_string(), message: msg.into() }
}

impl TrainConfig {
    /// A config with every default filled in.
    pub fn new(method: Method, data: DatasetSpec) -> Self {
        Self {
            method,
            prior: PriorSpec::default(),
            eta: default_eta(),
            eta_aux: default_eta(),
            m_train: default_m_train(),
            m_eval: default_m_eval(),
            optimizer: AdamConfig::default(),
            clip_grad: true,
            clip_norm: default_clip(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            ensemble_size: default_ensemble_size(),
            val_fraction: default_val_fraction(),
            network: NetworkConfig::default(),
            data,
            ood: None,
            vi_prior_var: default_vi_prior_var(),
            vi_log_std_init: default_vi_log_std(),
            n_bins: default_bins(),
            binning: Binning::default(),
            common_random_numbers: false,
            bench: BenchConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let positive = [
            ("m_train", self.m_train),
            ("m_eval", self.m_eval),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("ensemble_size", self.ensemble_size),
            ("n_bins", self.n_bins),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(field(name, "must be at least 1"));
            }
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(field("eta", "must be a non-negative number"));
        }
        if !(self.eta_aux >= 0.0 && self.eta_aux.is_finite()) {
            return Err(field("eta_aux", "must be a non-negative number"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(field("optimizer", "need lr > 0, betas in [0, 1), eps > 0"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(field("clip_norm", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(field("val_fraction", "must lie in [0, 1)"));
        }
        if !(self.vi_prior_var > 0.0) {
            return Err(field("vi_prior_var", "must be positive"));
        }
        if self.network.hidden.contains(&0) {
            return Err(field("network.hidden", "widths must be at least 1"));
        }
        if self.method == Method::Vi && !matches!(self.prior, PriorSpec::Naive { .. }) {
            return Err(field("prior", "the vi method only supports the naive prior"));
        }
        if self.bench.m_values.is_empty() || self.bench.m_values.contains(&0) || self.bench.epochs == 0 {
            return Err(field("bench", "m_values must be non-empty and positive, epochs >= 1"));
        }
        Ok(())
    }

    /// Parses TOML, or JSON when the text starts with `{`. A JSON run manifest
    /// is accepted too; its `config` member is used.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let cfg: TrainConfig = if text.trim_start().starts_with('{') {
            let value: serde_json::Value =
                serde_json::from_str(text).map_err(|e| HarnessError::Parse(format!("JSON: {e}")))?;
            let inner = match value.get("config") {
                Some(c) if value.get("version").is_some() => c.clone(),
                _ => value,
            };
            serde_json::from_value(inner).map_err(|e| HarnessError::Parse(format!("JSON: {e}")))?
        } else {
            toml::from_str(text).map_err(|e| HarnessError::Parse(format!("TOML: {e}")))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            HarnessError::Parse(m) => HarnessError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Makes relative CSV paths absolute against `base_dir`, so the config can be
    /// replayed from anywhere.
    pub fn resolve_paths(&mut self, base_dir: &Path) {
        for spec in std::iter::once(&mut self.data).chain(self.ood.as_mut()) {
            if let DatasetSpec::Csv { path, .. } = spec {
                if path.is_relative() {
                    let joined = base_dir.join(&*path);
                    *path = std::fs::canonicalize(&joined).unwrap_or(joined);
                }
            }
        }
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Parse(format!("TOML: {e}")))
    }
}

/// Directory used to resolve relative dataset paths in a config file.
pub fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}
