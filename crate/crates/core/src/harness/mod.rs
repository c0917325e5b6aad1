//! Experiment runner behind the `vifo` command line: training single models and
//! ensembles, evaluation, timing benchmarks, verifiers and the sinusoid demo.

mod bench;
mod config;
mod evaluate;
mod model;
mod sinusoid;
mod train;
mod verify;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use bench::{linear_fit, run_bench, write_bench_csv, BenchRow};
pub use config::{config_dir, BenchConfig, Method, NetworkConfig, TrainConfig};
pub use evaluate::{config_ood, evaluate_members, evaluate_run, load_feature_csv, write_metrics_csv, MetricsRow};
pub use model::Model;
pub use sinusoid::{run_sinusoid, write_sinusoid_csv, SinusoidConfig, SinusoidResult, SinusoidRow};
pub use train::{
    
    build_data, train_ensemble, train_member, write_run, EpochLoss, MemberRun, RunManifest, RunSeeds, Trainer,
};
pub use verify::{run_verify, CheckResult, VerifyHooks, VerifyReport};

use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::networks::NetworkError;
use crate::regularizers::RegularizerError;
use crate::vi::ViError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("non-finite training loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("model has {model} outputs but the dataset needs {data}")]
    OutputMismatch { model: usize, data: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Regularizer(#[from] RegularizerError),
    #[error(transparent)]
    Vi(#[from] ViError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

/// Trains the ensemble described by `cfg`, evaluates it and writes all run
/// artifacts under `out_dir`. OOD inputs come from `ood_path` when given, else from the config.
pub fn run_train(
    cfg: &TrainConfig,
    base_dir: &Path,
    out_dir: &Path,
    threads: usize,
    ood_path: Option<&Path>,
) -> Result<(RunManifest, Vec<MemberRun>), HarnessError> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let (train, eval) = build_data(cfg, base_dir)?;
    let members = train_ensemble(cfg, &train, threads)?;
    let ood = match ood_path {
        Some(p) => Some(load_feature_csv(p)?),
        None => config_ood(cfg, base_dir)?,
    };
    let refs: Vec<(u64, &Model)> = members.iter().map(|m| (m.seed, &m.model)).collect();
    let (metrics, reports) = evaluate_members(cfg, &refs, &eval, ood.as_ref())?;
    let manifest = RunManifest {
        version: version_string(),
        config: cfg.clone(),
        seeds: RunSeeds { run: cfg.seed, members: members.iter().map(|m| m.seed).collect() },
        losses: members.iter().map(|m| m.losses.clone()).collect(),
        metrics,
        reports,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    write_run(out_dir, &manifest, &members)?;
    Ok((manifest, members))
}

/// `v<crate version>` plus the git description baked in at build time, if any.
pub fn version_string() -> String {
    match option_env!("VIFO_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => format!("v{}-{d}", env!("CARGO_PKG_VERSION")),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// Worker count: explicit value, else `VIFO_THREADS`, else all cores.
pub fn resolve_threads(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var("VIFO_THREADS").ok().and_then(|v| v.parse().ok()))
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}
