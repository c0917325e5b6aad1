//! Mean-field Gaussian VI over the weights of the mean path, and the
//! deterministic base model (the same weights with the noise switched off).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Tensor, Var};
use crate::networks::{mean_path_forward, MlpSpec, Network, NetworkError};
use crate::variational::{point_nll, softmax, standard_normal, CategoricalPrediction, Labels};

#[derive(Debug, Error)]
pub enum ViError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("invalid VI config: {0}")]
    Config(String),
    #[error("batch is empty or labels do not match inputs")]
    EmptyBatch,
    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
}

pub const DEFAULT_LOG_STD: f64 = -3.0;

/// Means and log standard deviations for every weight of the mean path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianWeights {
    spec: MlpSpec,
    mean: Vec<Tensor>,
    log_std: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViConfig {
    pub prior_var: f64,
    pub eta: f64,
    pub m: usize,
}

impl Default for ViConfig {
    fn default() -> Self {
        Self { prior_var: 0.05, eta: 0.1, m: 10 }
    }
}

impl ViConfig {
    pub fn validate(&self) -> Result<(), ViError> {
        if !(self.prior_var > 0.0) || !(self.eta >= 0.0) || self.m == 0 {
            return Err(ViError::Config(format!(
                "need prior_var > 0, eta >= 0, M >= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

impl GaussianWeights {
    /// Means from the mean path of a freshly initialized network, log-stds at `log_std`.
    pub fn init(spec: MlpSpec, seed: u64, log_std: f64) -> Result<Self, ViError> {
        let net = Network::init(spec.clone(), seed)?;
        let mean = net.mean_path_params().to_vec();
        let log_std = mean.iter().map(|t| Tensor::filled(t.shape(), log_std)).collect();
        Ok(Self { spec, mean, log_std })
    }

    pub fn from_parts(spec: MlpSpec, mean: Vec<Tensor>, log_std: Vec<Tensor>) -> Result<Self, ViError> {
        let shapes = spec.mean_path_shapes();
        if mean.len() != shapes.len() || log_std.len() != shapes.len() {
            return Err(NetworkError::ParamCount { expected: shapes.len(), got: mean.len().min(log_std.len()) }.into());
        }
        for (i, (m, s)) in mean.iter().zip(&log_std).enumerate() {
            if m.shape() != shapes[i].as_slice() || s.shape() != shapes[i].as_slice() {
                return Err(NetworkError::ParamShape {
                    index: i,
                    expected: shapes[i].iter().product(),
                    got: m.len().min(s.len()),
                }
                .into());
            }
        }
        Ok(Self { spec, mean, log_std })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn mean(&self) -> &[Tensor] {
        &self.mean
    }

    pub fn mean_mut(&mut self) -> &mut [Tensor] {
        &mut self.mean
    }

    pub fn log_std(&self) -> &[Tensor] {
        &self.log_std
    }

    /// Number of weights (each carries a mean and a log-std).
    pub fn weight_count(&self) -> usize {
        self.mean.iter().map(Tensor::len).sum()
    }

    /// Means followed by log-stds, in layer order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.mean.iter().chain(&self.log_std).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mean.iter_mut().chain(self.log_std.iter_mut()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.log_std).all(Tensor::is_finite)
    }

    /// Trainable leaves: `(means, log_stds)`.
    pub fn bind(&self, g: &mut Graph) -> (Vec<Var>, Vec<Var>) {
        (
            self.mean.iter().map(|t| g.param(t.clone())).collect(),
            self.log_std.iter().map(|t| g.param(t.clone())).collect(),
        )
    }

    /// Closed-form `KL(q(W) ‖ N(0, prior_var·I))`, a sum of scalar Gaussian KLs.
    pub fn kl(&self, prior_var: f64) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_std)
            .flat_map(|(m, s)| m.data().iter().zip(s.data()))
            .map(|(&mu, &ls)| scalar_kl(mu, (2.0 * ls).exp(), prior_var))
            .sum()
    }

    pub fn sample_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, s)| {
                let eps = standard_normal(rng, 1, m.len());
                let data = m
                    .data()
                    .iter()
                    .zip(s.data())
                    .zip(eps.data())
                    .map(|((&mu, &ls), &e)| mu + ls.exp() * e)
                    .collect();
                Tensor::new(m.shape().to_vec(), data).expect("same shape")
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String, ViError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ViError> {
        let w: Self = serde_json::from_str(s)?;
        Self::from_parts(w.spec, w.mean, w.log_std)
    }
}

/// `KL(N(μ, v) ‖ N(0, p))` for scalars.
pub fn scalar_kl(mu: f64, v: f64, p: f64) -> f64 {
    0.5 * (v / p + mu * mu / p - 1.0 + p.ln() - v.ln())
}

fn eval_mean_path(spec: &MlpSpec, weights: &[Tensor], x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let vars: Vec<Var> = weights.iter().map(|w| g.constant(w.clone())).collect();
    let xv = g.constant(x.clone());
    let out = mean_path_forward(&mut g, &vars, xv);
    debug_assert_eq!(g.shape(out)[1], spec.output_dim);
    g.value(out).clone()
}

/// Nodes of the VI objective.
#[derive(Debug, Clone, Copy)]
pub struct ViObjective {
    pub total: Var,
    pub nll: Var,
    pub kl: Var,
}

/// `mean NLL over M weight draws + η · KL / dataset_size`.
#[allow(clippy::too_many_arguments)]
pub fn build_vi_objective<R: Rng + ?Sized>(
    g: &mut Graph,
    qw: &GaussianWeights,
    means: &[Var],
    log_stds: &[Var],
    x: &Tensor,
    labels: Labels,
    dataset_size: usize,
    cfg: &ViConfig,
    rng: &mut R,
) -> Result<ViObjective, ViError> {
    cfg.validate()?;
    if x.rows() == 0 || labels.len() != x.rows() || dataset_size == 0 {
        return Err(ViError::EmptyBatch);
    }
    if x.cols() != qw.spec.input_dim {
        return Err(NetworkError::Dimension { expected: qw.spec.input_dim, got: x.cols() }.into());
    }
    let xv = g.constant(x.clone());
    let stds: Vec<Var> = log_stds.iter().map(|&s| g.exp(s)).collect();
    let mut nll_sum: Option<Var> = None;
    for _ in 0..cfg.m {
        let ws: Vec<Var> = means
            .iter()
            .zip(&stds)
            .zip(&qw.mean)
            .map(|((&m, &s), t)| {
                let eps = standard_normal(rng, 1, t.len());
                let eps = g.constant(Tensor::new(t.shape().to_vec(), eps.into_data()).expect("same shape"));
                let noise = g.mul(s, eps);
                g.add(m, noise)
            })
            .collect();
        let out = mean_path_forward(g, &ws, xv);
        let nll = point_nll(g, out, labels, qw.spec.noise_link);
        nll_sum = Some(match nll_sum {
            None => nll,
            Some(acc) => g.add(acc, nll),
        });
    }
    let nll = g.scale(nll_sum.expect("M >= 1"), 1.0 / cfg.m as f64);

    let p = cfg.prior_var;
    let mut kl_sum: Option<Var> = None;
    for (&m, &ls) in means.iter().zip(log_stds) {
        // ½[e^{2 ls}/p + μ²/p − 1 + ln p − 2 ls]
        let two_ls = g.scale(ls, 2.0);
        let var = g.exp(two_ls);
        let m2 = g.square(m);
        let t = g.add(var, m2);
        let t = g.scale(t, 1.0 / p);
        let t = g.sub(t, two_ls);
        let t = g.add_scalar(t, p.ln() - 1.0);
        let s = g.sum(t);
        kl_sum = Some(match kl_sum {
            None => s,
            Some(acc) => g.add(acc, s),
        });
    }
    let kl = g.scale(kl_sum.expect("at least one layer"), 0.5);
    let kl_term = g.scale(kl, cfg.eta / dataset_size as f64);
    let total = g.add(nll, kl_term);
    Ok(ViObjective { total, nll, kl })
}

pub fn vi_objective<R: Rng + ?Sized>(
    qw: &GaussianWeights,
    x: &Tensor,
    labels: Labels,
    dataset_size: usize,
    cfg: &ViConfig,
    rng: &mut R,
) -> Result<f64, ViError> {
    let mut g = Graph::new();
    let means: Vec<Var> = qw.mean.iter().map(|t| g.constant(t.clone())).collect();
    let stds: Vec<Var> = qw.log_std.iter().map(|t| g.constant(t.clone())).collect();
    let obj = build_vi_objective(&mut g, qw, &means, &stds, x, labels, dataset_size, cfg, rng)?;
    Ok(g.value(obj.total).item())
}

/// Deterministic likelihood loss of the mean path with weights `vars`.
pub fn build_base_objective(g: &mut Graph, spec: &MlpSpec, vars: &[Var], x: &Tensor, labels: Labels) -> Result<Var, ViError> {
    if x.rows() == 0 || labels.len() != x.rows() {
        return Err(ViError::EmptyBatch);
    }
    if x.cols() != spec.input_dim {
        return Err(NetworkError::Dimension { expected: spec.input_dim, got: x.cols() }.into());
    }
    let xv = g.constant(x.clone());
    let out = mean_path_forward(g, vars, xv);
    Ok(point_nll(g, out, labels, spec.noise_link))
}

/// Raw mean-path outputs of the base model (weights = VI means).
pub fn base_forward(qw: &GaussianWeights, x: &Tensor) -> Tensor {
    eval_mean_path(&qw.spec, &qw.mean, x)
}

pub fn base_predict_classification(qw: &GaussianWeights, x: &Tensor) -> Vec<CategoricalPrediction> {
    let out = base_forward(qw, x);
    (0..out.rows())
        .map(|i| CategoricalPrediction::new(softmax(out.row(i))).expect("softmax is on the simplex"))
        .collect()
}

/// Predictive by averaging softmax outputs over `m` weight draws.
pub fn vi_predict_classification<R: Rng + ?Sized>(
    qw: &GaussianWeights,
    x: &Tensor,
    m: usize,
    rng: &mut R,
) -> Vec<CategoricalPrediction> {
    let n = x.rows();
    let k = qw.spec.output_dim;
    let mut acc = vec![0.0; n * k];
    for _ in 0..m {
        let out = eval_mean_path(&qw.spec, &qw.sample_weights(rng), x);
        for i in 0..n {
            for (a, p) in acc[i * k..(i + 1) * k].iter_mut().zip(softmax(out.row(i))) {
                *a += p;
            }
        }
    }
    acc.chunks(k)
        .map(|c| CategoricalPrediction::new(c.iter().map(|p| p / m as f64).collect()).expect("average of simplex points"))
        .collect()
}

/// Predictive mean and variance of `y` for regression: the moments of the
/// mixture over `m` weight draws (`m = 0` uses the means only).
pub fn vi_predict_regression<R: Rng + ?Sized>(
    qw: &GaussianWeights,
    x: &Tensor,
    m: usize,
    rng: &mut R,
) -> Vec<(f64, f64)> {
    let link = qw.spec.noise_link;
    let outs: Vec<Tensor> = if m == 0 {
        vec![base_forward(qw, x)]
    } else {
        (0..m).map(|_| eval_mean_path(&qw.spec, &qw.sample_weights(rng), x)).collect()
    };
    let s = outs.len() as f64;
    (0..x.rows())
        .map(|i| {
            let mean = outs.iter().map(|o| o.get2(i, 0)).sum::<f64>() / s;
            let second = outs
                .iter()
                .map(|o| link.apply(o.get2(i, 1)) + o.get2(i, 0).powi(2))
                .sum::<f64>()
                / s;
            (mean, second - mean * mean)
        })
        .collect()
}
