//! Mini-batch training of single models and ensembles, and run artifacts.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::evaluate::MetricsRow;
use super::{write_file, HarnessError, Method, Model, TrainConfig};
use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::data::{sample_aux, Dataset};
use crate::metrics::EvalReport;
use crate::networks::{MlpSpec, Network};
use crate::optim::{clip_global_norm, Adam};
use crate::regularizers::{build_objective, ObjectiveConfig};
use crate::vi::{build_base_objective, build_vi_objective, GaussianWeights, ViConfig};

const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const AUX_STREAM: u64 = 3;
/// Stream 4 is evaluation noise; stream 0 of the run seed generates and splits the data.
const INIT_STREAM: u64 = 5;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Network shape for `data` under the run's network settings.
pub(crate) fn mlp_spec(cfg: &TrainConfig, data: &Dataset) -> MlpSpec {
    let mut spec = MlpSpec::new(data.d(), cfg.network.hidden.clone(), data.output_dim())
        .with_link(cfg.network.link)
        .with_noise_link(cfg.network.noise_link);
    spec.shared_trunk = cfg.network.shared_trunk;
    spec.init_variance = cfg.network.init_variance;
    spec
}

/// The `(train, eval)` datasets of a run. With `val_fraction = 0` both are the full data.
pub fn build_data(cfg: &TrainConfig, base_dir: &Path) -> Result<(Dataset, Dataset), HarnessError> {
    let full = cfg.data.build(cfg.seed, base_dir)?;
    if cfg.val_fraction == 0.0 {
        return Ok((full.clone(), full));
    }
    Ok(full.split(cfg.val_fraction, cfg.seed)?)
}

/// One model plus its optimizer state and random streams.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    data: Dataset,
    model: Model,
    adam: Adam,
    shuffle_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    aux_rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, data: Dataset, seed: u64) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let spec = mlp_spec(cfg, &data);
        let init_seed = stream_rng(seed, INIT_STREAM).next_u64();
        let model = match cfg.method {
            Method::Vifo => Model::Vifo(Network::init(spec, init_seed)?),
            Method::Vi => Model::Vi(GaussianWeights::init(spec, init_seed, cfg.vi_log_std_init)?),
            Method::Base => Model::Base(GaussianWeights::init(spec, init_seed, cfg.vi_log_std_init)?),
        };
        let sizes: Vec<usize> = match &model {
            Model::Vifo(n) => n.params().iter().map(Tensor::len).collect(),
            Model::Vi(w) => w.params().into_iter().map(Tensor::len).collect(),
            Model::Base(w) => w.mean().iter().map(Tensor::len).collect(),
        };
        Ok(Self {
            cfg: cfg.clone(),
            data,
            model,
            adam: Adam::new(cfg.optimizer, sizes),
            shuffle_rng: stream_rng(seed, SHUFFLE_STREAM),
            noise_rng: stream_rng(seed, NOISE_STREAM),
            aux_rng: stream_rng(seed, AUX_STREAM),
            epoch: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One shuffled pass over the data; returns the example-weighted mean batch loss.
    pub fn run_epoch(&mut self) -> Result<f64, HarnessError> {
        let mut order: Vec<usize> = (0..self.data.n()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut total = 0.0;
        for (step, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let loss = self.step(idx).map_err(|e| match e {
                HarnessError::Autodiff(AutodiffError::NonFinite { .. }) => {
                    HarnessError::NonFiniteLoss { epoch: self.epoch, step }
                }
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(HarnessError::NonFiniteLoss { epoch: self.epoch, step });
            }
            total += loss * idx.len() as f64;
        }
        self.epoch += 1;
        Ok(total / self.data.n() as f64)
    }

    fn step(&mut self, idx: &[usize]) -> Result<f64, HarnessError> {
        let (x, targets) = self.data.gather(idx);
        let labels = targets.as_labels();
        let cfg = &self.cfg;
        let mut g = Graph::new();
        let (loss, vars): (Var, Vec<Var>) = match &self.model {
            Model::Vifo(net) => {
                let vars = net.bind(&mut g);
                let aux = (cfg.eta_aux > 0.0).then(|| sample_aux(&self.data, idx.len(), &mut self.aux_rng));
                let ocfg = ObjectiveConfig { eta: cfg.eta, eta_aux: cfg.eta_aux, m: cfg.m_train };
                let obj =
                    build_objective(&mut g, net, &vars, &x, labels, aux.as_ref(), &cfg.prior, &ocfg, &mut self.noise_rng)?;
                (obj.total, vars)
            }
            Model::Vi(w) => {
                let (means, lstds) = w.bind(&mut g);
                let vcfg = ViConfig { prior_var: cfg.vi_prior_var, eta: cfg.eta, m: cfg.m_train };
                let obj =
                    build_vi_objective(&mut g, w, &means, &lstds, &x, labels, self.data.n(), &vcfg, &mut self.noise_rng)?;
                (obj.total, means.into_iter().chain(lstds).collect())
            }
            Model::Base(w) => {
                let vars: Vec<Var> = w.mean().iter().map(|t| g.param(t.clone())).collect();
                (build_base_objective(&mut g, w.spec(), &vars, &x, labels)?, vars)
            }
        };
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Ok(value);
        }
        let mut grads = g.grad(loss, &vars)?;
        if cfg.clip_grad {
            clip_global_norm(&mut grads, cfg.clip_norm);
        }
        match &mut self.model {
            Model::Vifo(net) => self.adam.update(net.params_mut().iter_mut(), &grads),
            Model::Vi(w) => self.adam.update(w.params_mut(), &grads),
            Model::Base(w) => self.adam.update(w.mean_mut().iter_mut(), &grads),
        }
        Ok(value)
    }
}

/// A trained ensemble member.
#[derive(Debug, Clone)]
pub struct MemberRun {
    pub index: usize,
    pub seed: u64,
    pub model: Model,
    pub losses: Vec<f64>,
    pub seconds: f64,
}

/// Trains member `index` with seed `cfg.seed + index` for `cfg.epochs` epochs.
pub fn train_member(cfg: &TrainConfig, data: &Dataset, index: usize) -> Result<MemberRun, HarnessError> {
    let seed = cfg.seed.wrapping_add(index as u64);
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg, data.clone(), seed)?;
    let losses = (0..cfg.epochs).map(|_| trainer.run_epoch()).collect::<Result<Vec<_>, _>>()?;
    Ok(MemberRun { index, seed, model: trainer.into_model(), losses, seconds: start.elapsed().as_secs_f64() })
}

/// Trains `cfg.ensemble_size` independent members on a pool of `threads` workers.
pub fn train_ensemble(cfg: &TrainConfig, data: &Dataset, threads: usize) -> Result<Vec<MemberRun>, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| HarnessError::ThreadPool(e.to_string()))?;
    pool.install(|| (0..cfg.ensemble_size).into_par_iter().map(|i| train_member(cfg, data, i)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSeeds {
    /// Seeds the dataset generator, the split and (with common random numbers) evaluation.
    pub run: u64,
    pub members: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub member: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Everything needed to reproduce and audit a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: TrainConfig,
    pub seeds: RunSeeds,
    /// `losses[i][e]`: member `i`'s mean training loss in epoch `e`.
    pub losses: Vec<Vec<f64>>,
    /// One row per member, then the ensemble row.
    pub metrics: Vec<MetricsRow>,
    /// Classification reports in the same order as `metrics`.
    pub reports: Vec<EvalReport>,
    pub wall_clock_seconds: f64,
}

/// Writes `manifest.json`, `losses.csv`, `metrics.csv` and `models/member_<i>.json` under `out_dir`.
pub fn write_run(out_dir: &Path, manifest: &RunManifest, members: &[MemberRun]) -> Result<(), HarnessError> {
    for m in members {
        write_file(&out_dir.join("models").join(format!("member_{}.json", m.index)), &m.model.to_json()?)?;
    }
    write_file(&out_dir.join("manifest.json"), &serde_json::to_string_pretty(manifest)?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    for (member, series) in manifest.losses.iter().enumerate() {
        for (epoch, &loss) in series.iter().enumerate() {
            w.serialize(EpochLoss { member, epoch, loss })?;
        }
    }
    write_file(&out_dir.join("losses.csv"), &csv_string(w)?)?;
    super::write_metrics_csv(&out_dir.join("metrics.csv"), &manifest.metrics)
}

pub(crate) fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String, HarnessError> {
    let bytes = w.into_inner().map_err(|e| HarnessError::Invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| HarnessError::Invalid(e.to_string()))
}
