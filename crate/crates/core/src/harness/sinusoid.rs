//! The 1-D sinusoid demo: fit `2 sin x` on two outer intervals and report the
//! predictive band over `[−π, π]`, including the gap between the intervals.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{csv_string, train_member};
use super::{write_file, HarnessError, Method, TrainConfig};
use crate::autodiff::Tensor;
use crate::data::{sinusoid_grid, DatasetSpec, SINUSOID_INTERVALS};
use crate::networks::Link;
use crate::regularizers::PriorSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinusoidConfig {
    pub eta: f64,
    pub eta_aux: f64,
    pub seed: u64,
    pub n: usize,
    pub noise: f64,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub m_train: usize,
    pub grid_points: usize,
}

impl Default for SinusoidConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            eta_aux: 1.0,
            seed: 0,
            n: 100,
            noise: 0.1,
            hidden: vec![50; 4],
            epochs: 1000,
            batch_size: 50,
            lr: 1e-3,
            m_train: 10,
            grid_points: 201,
        }
    }
}

impl SinusoidConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Parse(format!("TOML: {e}")))
    }

    /// The equivalent run config: VIFO with the collapsed-mean prior and
    /// exponential links on both the output variance and the noise scale.
    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::new(Method::Vifo, DatasetSpec::Sinusoid { n: self.n, noise: self.noise });
        cfg.prior = PriorSpec::collapsed_mean();
        cfg.eta = self.eta;
        cfg.eta_aux = self.eta_aux;
        cfg.seed = self.seed;
        cfg.val_fraction = 0.0;
        cfg.ensemble_size = 1;
        cfg.epochs = self.epochs;
        cfg.batch_size = self.batch_size;
        cfg.m_train = self.m_train;
        cfg.optimizer.lr = self.lr;
        cfg.network.hidden = self.hidden.clone();
        cfg.network.link = Link::Exp;
        cfg.network.noise_link = Link::Exp;
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinusoidRow {
    pub x: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinusoidResult {
    pub rows: Vec<SinusoidRow>,
    /// RMSE of the predictive mean against `2 sin x` over the training intervals.
    pub train_rmse: f64,
    /// Mean predictive standard deviation over the open gap `(−π/2, π/2)`.
    pub gap_mean_std: f64,
    pub losses: Vec<f64>,
}

const DENSE: usize = 400;

pub fn run_sinusoid(sc: &SinusoidConfig) -> Result<SinusoidResult, HarnessError> {
    let cfg = sc.train_config();
    cfg.validate()?;
    let data = cfg.data.build(cfg.seed, Path::new("."))?;
    let run = train_member(&cfg, &data, 0)?;
    let mut rng = super::train::stream_rng(cfg.seed, 4);
    let mut predict = |xs: &[f64]| -> Result<Vec<(f64, f64)>, HarnessError> {
        let x = Tensor::matrix(xs.len(), 1, xs.to_vec()).expect("column of inputs");
        run.model.predict_regression(&x, cfg.m_eval, &mut rng)
    };

    let grid = sinusoid_grid(sc.grid_points);
    let rows = grid
        .iter()
        .zip(predict(&grid)?)
        .map(|(&x, (mean, var))| SinusoidRow { x, mean, std: var.sqrt() })
        .collect();

    let train_x: Vec<f64> = SINUSOID_INTERVALS
        .iter()
        .flat_map(|&(lo, hi)| (0..DENSE).map(move |i| lo + (hi - lo) * i as f64 / (DENSE - 1) as f64))
        .collect();
    let sq: f64 = train_x
        .iter()
        .zip(predict(&train_x)?)
        .map(|(&x, (m, _))| (m - 2.0 * x.sin()).powi(2))
        .sum();
    let train_rmse = (sq / train_x.len() as f64).sqrt();

    let gap_x: Vec<f64> = (1..=DENSE).map(|i| -0.5 * PI + PI * i as f64 / (DENSE + 1) as f64).collect();
    let gap_mean_std = predict(&gap_x)?.iter().map(|&(_, v)| v.sqrt()).sum::<f64>() / gap_x.len() as f64;

    Ok(SinusoidResult { rows, train_rmse, gap_mean_std, losses: run.losses })
}

pub fn write_sinusoid_csv(path: &Path, rows: &[SinusoidRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    write_file(path, &csv_string(w)?)
}
