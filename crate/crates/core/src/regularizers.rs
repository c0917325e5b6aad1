//! Closed-form KL regularizers on `q(z|x)` and the full training objective.
//!
//! Each regularizer has a scalar form on [`VariationalOutput`] values and a
//! graph form on batched `[B, K]` head outputs. Per-example kinds return a `[B]`
//! node; the `_all` kinds couple the batch through its statistics and return a
//! scalar that is summed over the batch.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::autodiff::{Graph, Tensor, Var};
use crate::networks::{Network, NetworkError};
use crate::variational::{mc_nll, standard_normal, Labels, VariationalOutput};

#[derive(Debug, Error)]
pub enum RegularizerError {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("prior mean has {got} entries, expected 1 or {expected}")]
    PriorDim { expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("eta_aux > 0 but no auxiliary inputs were supplied")]
    MissingAux,
    #[error(transparent)]
    Network(#[from] NetworkError),
}

fn default_mu_p() -> Vec<f64> {
    vec![0.0]
}

/// Prior family and hyperparameters for the output-space KL term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    /// Fixed `N(μ_p, vI)`; `mu_p` of length 1 broadcasts.
    Naive {
        #[serde(default = "default_mu_p")]
        mu_p: Vec<f64>,
        v: f64,
    },
    CollapsedMean { gamma: f64, alpha: f64 },
    CollapsedMv { alpha: f64, beta: f64, delta: f64 },
    EmpiricalBayes { alpha: f64, beta: f64 },
    MeanAll { gamma: f64, alpha: f64 },
    MvAll { alpha: f64, beta: f64, delta: f64 },
    EbAll { alpha: f64, beta: f64 },
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self::naive()
    }
}

impl PriorSpec {
    pub fn naive() -> Self {
        Self::Naive { mu_p: vec![0.0], v: 1.0 }
    }
    pub fn collapsed_mean() -> Self {
        Self::CollapsedMean { gamma: 0.3, alpha: 5.7 }
    }
    pub fn collapsed_mv() -> Self {
        Self::CollapsedMv { alpha: 0.5, beta: 0.01, delta: 0.1 }
    }
    pub fn empirical_bayes() -> Self {
        Self::EmpiricalBayes { alpha: 4.4798, beta: 10.0 }
    }
    pub fn mean_all() -> Self {
        Self::MeanAll { gamma: 0.3, alpha: 5.7 }
    }
    pub fn mv_all() -> Self {
        Self::MvAll { alpha: 0.5, beta: 0.01, delta: 0.1 }
    }
    pub fn eb_all() -> Self {
        Self::EbAll { alpha: 4.4798, beta: 10.0 }
    }

    /// Short method label (`naive`, `mean`, `mv`, `eb`, `mean_all`, `mv_all`, `eb_all`).
    pub fn label(&self) -> &'static str {
        match self {
            Self::Naive { .. } => "naive",
            Self::CollapsedMean { .. } => "mean",
            Self::CollapsedMv { .. } => "mv",
            Self::EmpiricalBayes { .. } => "eb",
            Self::MeanAll { .. } => "mean_all",
            Self::MvAll { .. } => "mv_all",
            Self::EbAll { .. } => "eb_all",
        }
    }

    pub fn is_batch_coupled(&self) -> bool {
        matches!(self, Self::MeanAll { .. } | Self::MvAll { .. } | Self::EbAll { .. })
    }

    pub fn validate(&self, k: usize) -> Result<(), RegularizerError> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(RegularizerError::InvalidHyper(format!("{name} must be positive, got {v}")))
            }
        };
        let delta_ok = |d: f64| {
            if d > 0.0 && d < 1.0 {
                Ok(())
            } else {
                Err(RegularizerError::InvalidHyper(format!("delta must lie in (0, 1), got {d}")))
            }
        };
        match self {
            Self::Naive { mu_p, v } => {
                pos("v", *v)?;
                if mu_p.len() != 1 && mu_p.len() != k {
                    return Err(RegularizerError::PriorDim { expected: k, got: mu_p.len() });
                }
                if mu_p.iter().any(|m| !m.is_finite()) {
                    return Err(RegularizerError::InvalidHyper("mu_p must be finite".into()));
                }
                Ok(())
            }
            Self::CollapsedMean { gamma, alpha } | Self::MeanAll { gamma, alpha } => {
                pos("gamma", *gamma)?;
                pos("alpha", *alpha)
            }
            Self::CollapsedMv { alpha, beta, delta } | Self::MvAll { alpha, beta, delta } => {
                pos("alpha", *alpha)?;
                pos("beta", *beta)?;
                delta_ok(*delta)
            }
            Self::EmpiricalBayes { alpha, beta } | Self::EbAll { alpha, beta } => {
                pos("alpha", *alpha)?;
                pos("beta", *beta)
            }
        }
    }
}

fn prior_mean(mu_p: &[f64], i: usize) -> f64 {
    if mu_p.len() == 1 {
        mu_p[0]
    } else {
        mu_p[i]
    }
}

fn sum_log(v: &[f64]) -> f64 {
    v.iter().map(|s| s.ln()).sum()
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|m| m * m).sum()
}

pub fn kl_naive(q: &VariationalOutput, mu_p: &[f64], v: f64) -> f64 {
    0.5 * q
        .mu
        .iter()
        .zip(&q.sigma2)
        .enumerate()
        .map(|(i, (&m, &s2))| {
            let d = m - prior_mean(mu_p, i);
            s2 / v + d * d / v - 1.0 + v.ln() - s2.ln()
        })
        .sum::<f64>()
}

pub fn reg_collapsed_mean(q: &VariationalOutput, gamma: f64, alpha: f64) -> f64 {
    let k = q.k() as f64;
    (q.sigma2.iter().sum::<f64>() + gamma / (gamma + alpha) * sum_sq(&q.mu)) / (2.0 * gamma)
        - 0.5 * sum_log(&q.sigma2)
        + 0.5 * k * (gamma + alpha).ln()
        - 0.5 * k
}

pub fn reg_collapsed_mv(q: &VariationalOutput, alpha: f64, beta: f64, delta: f64) -> f64 {
    (alpha + 0.5)
        * q.mu
            .iter()
            .zip(&q.sigma2)
            .map(|(&m, &s2)| (beta + 0.5 * delta * m * m + 0.5 * s2).ln())
            .sum::<f64>()
        - 0.5 * sum_log(&q.sigma2)
}

/// Per-dimension constant dropped by [`reg_collapsed_mv`]: adding `K` times this
/// recovers the full plugged-in two-term objective.
pub fn mv_constant_per_dim(alpha: f64, beta: f64, delta: f64) -> f64 {
    ln_gamma(alpha) - ln_gamma(alpha + 0.5) - alpha * beta.ln() + 0.5 * (1.0 / delta).ln() - 0.5
}

/// Parameter-independent constants of the `mv_all` objective for `n` examples of dimension `k`.
pub fn mv_all_constants(n: usize, k: usize, alpha: f64, beta: f64, delta: f64) -> f64 {
    (n * k) as f64 * mv_constant_per_dim(alpha, beta, delta)
}

/// Optimal shared prior variance `(μᵀμ + 1ᵀσ² + 2β) / (K + 2α + 2)`.
pub fn eb_optimal_s(q: &VariationalOutput, alpha: f64, beta: f64) -> f64 {
    (sum_sq(&q.mu) + q.sigma2.iter().sum::<f64>() + 2.0 * beta) / (q.k() as f64 + 2.0 * alpha + 2.0)
}

pub fn reg_eb(q: &VariationalOutput, alpha: f64, beta: f64) -> f64 {
    let k = q.k() as f64;
    let a = sum_sq(&q.mu) + q.sigma2.iter().sum::<f64>();
    let s = eb_optimal_s(q, alpha, beta);
    0.5 * (k * s.ln() - sum_log(&q.sigma2)) - 0.5 * k + 0.5 * (k + 2.0 * alpha + 2.0) * a / (a + 2.0 * beta)
}

fn check_batch(batch: &[VariationalOutput]) -> Result<usize, RegularizerError> {
    let first = batch.first().ok_or(RegularizerError::EmptyBatch)?;
    let k = first.k();
    if let Some(bad) = batch.iter().find(|q| q.k() != k) {
        return Err(RegularizerError::PriorDim { expected: k, got: bad.k() });
    }
    Ok(k)
}

fn batch_mean_by_dim(batch: &[VariationalOutput], k: usize, f: impl Fn(&VariationalOutput, usize) -> f64) -> Vec<f64> {
    let n = batch.len() as f64;
    (0..k).map(|j| batch.iter().map(|q| f(q, j)).sum::<f64>() / n).collect()
}

pub fn reg_mean_all(batch: &[VariationalOutput], gamma: f64, alpha: f64) -> Result<f64, RegularizerError> {
    let k = check_batch(batch)?;
    let n = batch.len() as f64;
    let per: f64 = batch
        .iter()
        .map(|q| (q.sigma2.iter().sum::<f64>() + sum_sq(&q.mu)) / (2.0 * gamma) - 0.5 * sum_log(&q.sigma2))
        .sum();
    let mbar = batch_mean_by_dim(batch, k, |q, j| q.mu[j]);
    let nk = n * k as f64;
    Ok(per - 0.5 * n * (1.0 / gamma - 1.0 / (alpha + gamma)) * sum_sq(&mbar)
        + 0.5 * nk * (alpha + gamma).ln()
        - 0.5 * nk)
}

/// Parameter-dependent part of `mv_all`; see [`mv_all_constants`].
pub fn reg_mv_all(batch: &[VariationalOutput], alpha: f64, beta: f64, delta: f64) -> Result<f64, RegularizerError> {
    let k = check_batch(batch)?;
    let n = batch.len() as f64;
    let m2 = batch_mean_by_dim(batch, k, |q, j| q.mu[j] * q.mu[j]);
    let s2 = batch_mean_by_dim(batch, k, |q, j| q.sigma2[j]);
    let shared: f64 = m2
        .iter()
        .zip(&s2)
        .map(|(&m, &s)| (beta + 0.5 * delta * m + 0.5 * s).ln())
        .sum();
    let logs: f64 = batch.iter().map(|q| sum_log(&q.sigma2)).sum();
    Ok((alpha + 0.5) * n * shared - 0.5 * logs)
}

pub fn eb_all_optimal_s(batch: &[VariationalOutput], alpha: f64, beta: f64) -> Result<f64, RegularizerError> {
    let k = check_batch(batch)?;
    let n = batch.len() as f64;
    let a_bar = batch.iter().map(|q| sum_sq(&q.mu) + q.sigma2.iter().sum::<f64>()).sum::<f64>() / n;
    Ok((a_bar + 2.0 * beta) / (k as f64 + 2.0 * alpha + 2.0))
}

pub fn reg_eb_all(batch: &[VariationalOutput], alpha: f64, beta: f64) -> Result<f64, RegularizerError> {
    let k = check_batch(batch)? as f64;
    let n = batch.len() as f64;
    let a: Vec<f64> = batch.iter().map(|q| sum_sq(&q.mu) + q.sigma2.iter().sum::<f64>()).collect();
    let a_sum: f64 = a.iter().sum();
    let a_bar = a_sum / n;
    let s = (a_bar + 2.0 * beta) / (k + 2.0 * alpha + 2.0);
    let logs: f64 = batch.iter().map(|q| sum_log(&q.sigma2)).sum();
    Ok(0.5 * n * k * s.ln() - 0.5 * logs - 0.5 * n * k
        + 0.5 * (k + 2.0 * alpha + 2.0) / (a_bar + 2.0 * beta) * a_sum)
}

/// Batch regularizer averaged per example: the mean of the per-example value,
/// or the coupled `_all` value divided by the batch size.
pub fn regularizer_value(prior: &PriorSpec, batch: &[VariationalOutput]) -> Result<f64, RegularizerError> {
    let k = check_batch(batch)?;
    prior.validate(k)?;
    let n = batch.len() as f64;
    let mean = |f: &dyn Fn(&VariationalOutput) -> f64| batch.iter().map(f).sum::<f64>() / n;
    Ok(match prior {
        PriorSpec::Naive { mu_p, v } => mean(&|q| kl_naive(q, mu_p, *v)),
        PriorSpec::CollapsedMean { gamma, alpha } => mean(&|q| reg_collapsed_mean(q, *gamma, *alpha)),
        PriorSpec::CollapsedMv { alpha, beta, delta } => mean(&|q| reg_collapsed_mv(q, *alpha, *beta, *delta)),
        PriorSpec::EmpiricalBayes { alpha, beta } => mean(&|q| reg_eb(q, *alpha, *beta)),
        PriorSpec::MeanAll { gamma, alpha } => reg_mean_all(batch, *gamma, *alpha)? / n,
        PriorSpec::MvAll { alpha, beta, delta } => reg_mv_all(batch, *alpha, *beta, *delta)? / n,
        PriorSpec::EbAll { alpha, beta } => reg_eb_all(batch, *alpha, *beta)? / n,
    })
}

/// Graph form, averaged per example like [`regularizer_value`].
pub fn regularizer_graph(g: &mut Graph, prior: &PriorSpec, mu: Var, sigma2: Var) -> Var {
    let shape = g.shape(mu).to_vec();
    let (n, k) = (shape[0] as f64, shape[1] as f64);
    let logs = g.log(sigma2);
    let logs_row = g.sum_last(logs);
    let mu2 = g.square(mu);
    match prior {
        PriorSpec::Naive { mu_p, v } => {
            let mp = if mu_p.len() == 1 {
                Tensor::filled(&[shape[1]], mu_p[0])
            } else {
                Tensor::vector(mu_p.clone())
            };
            let mp = g.constant(mp);
            let d = g.sub(mu, mp);
            let d2 = g.square(d);
            let t = g.add(sigma2, d2);
            let t = g.scale(t, 1.0 / v);
            let t = g.sub(t, logs);
            let t = g.add_scalar(t, v.ln() - 1.0);
            let per = g.sum_last(t);
            let per = g.scale(per, 0.5);
            g.mean(per)
        }
        PriorSpec::CollapsedMean { gamma, alpha } => {
            let m = g.scale(mu2, gamma / (gamma + alpha));
            let t = g.add(sigma2, m);
            let t = g.scale(t, 1.0 / (2.0 * gamma));
            let half_logs = g.scale(logs, 0.5);
            let t = g.sub(t, half_logs);
            let per = g.sum_last(t);
            let per = g.add_scalar(per, 0.5 * k * (gamma + alpha).ln() - 0.5 * k);
            g.mean(per)
        }
        PriorSpec::CollapsedMv { alpha, beta, delta } => {
            let a = g.scale(mu2, 0.5 * delta);
            let b = g.scale(sigma2, 0.5);
            let t = g.add(a, b);
            let t = g.add_scalar(t, *beta);
            let t = g.log(t);
            let t = g.scale(t, alpha + 0.5);
            let half_logs = g.scale(logs, 0.5);
            let t = g.sub(t, half_logs);
            let per = g.sum_last(t);
            g.mean(per)
        }
        PriorSpec::EmpiricalBayes { alpha, beta } => {
            let c = k + 2.0 * alpha + 2.0;
            let t = g.add(mu2, sigma2);
            let a = g.sum_last(t);
            let a2b = g.add_scalar(a, 2.0 * beta);
            let log_s = g.log(a2b);
            let log_s = g.add_scalar(log_s, -c.ln());
            let t1 = g.scale(log_s, 0.5 * k);
            let t2 = g.scale(logs_row, 0.5);
            let ratio = g.div(a, a2b);
            let t3 = g.scale(ratio, 0.5 * c);
            let per = g.sub(t1, t2);
            let per = g.add(per, t3);
            let per = g.add_scalar(per, -0.5 * k);
            g.mean(per)
        }
        PriorSpec::MeanAll { gamma, alpha } => {
            let t = g.add(sigma2, mu2);
            let t = g.scale(t, 1.0 / (2.0 * gamma));
            let per = g.sum_last(t);
            let half_logs = g.scale(logs_row, 0.5);
            let per = g.sub(per, half_logs);
            let per_sum = g.sum(per);
            let mbar = g.mean_axis0(mu);
            let mbar2 = g.square(mbar);
            let mbar2 = g.sum(mbar2);
            let coupled = g.scale(mbar2, -0.5 * n * (1.0 / gamma - 1.0 / (alpha + gamma)));
            let total = g.add(per_sum, coupled);
            let total = g.add_scalar(total, 0.5 * n * k * ((alpha + gamma).ln() - 1.0));
            g.scale(total, 1.0 / n)
        }
        PriorSpec::MvAll { alpha, beta, delta } => {
            let m2 = g.mean_axis0(mu2);
            let s2 = g.mean_axis0(sigma2);
            let a = g.scale(m2, 0.5 * delta);
            let b = g.scale(s2, 0.5);
            let t = g.add(a, b);
            let t = g.add_scalar(t, *beta);
            let t = g.log(t);
            let shared = g.sum(t);
            let shared = g.scale(shared, (alpha + 0.5) * n);
            let all_logs = g.sum(logs_row);
            let all_logs = g.scale(all_logs, 0.5);
            let total = g.sub(shared, all_logs);
            g.scale(total, 1.0 / n)
        }
        PriorSpec::EbAll { alpha, beta } => {
            let c = k + 2.0 * alpha + 2.0;
            let t = g.add(mu2, sigma2);
            let a = g.sum_last(t);
            let a_sum = g.sum(a);
            let a_bar2b = g.scale(a_sum, 1.0 / n);
            let a_bar2b = g.add_scalar(a_bar2b, 2.0 * beta);
            let log_s = g.log(a_bar2b);
            let log_s = g.add_scalar(log_s, -c.ln());
            let t1 = g.scale(log_s, 0.5 * n * k);
            let all_logs = g.sum(logs_row);
            let t2 = g.scale(all_logs, 0.5);
            let ratio = g.div(a_sum, a_bar2b);
            let t3 = g.scale(ratio, 0.5 * c);
            let total = g.sub(t1, t2);
            let total = g.add(total, t3);
            let total = g.add_scalar(total, -0.5 * n * k);
            g.scale(total, 1.0 / n)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub eta: f64,
    pub eta_aux: f64,
    pub m: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { eta: 0.1, eta_aux: 0.1, m: 10 }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), RegularizerError> {
        if !(self.eta >= 0.0) || !(self.eta_aux >= 0.0) {
            return Err(RegularizerError::InvalidHyper("eta and eta_aux must be non-negative".into()));
        }
        if self.m == 0 {
            return Err(RegularizerError::InvalidHyper("M must be at least 1".into()));
        }
        Ok(())
    }
}

/// Nodes of an assembled objective.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub nll: Var,
    pub reg: Var,
    pub aux_reg: Option<Var>,
}

/// `mean NLL + η · mean reg + η_aux · mean aux reg` on a graph whose network
/// parameters are `vars` (from [`Network::bind`]).
#[allow(clippy::too_many_arguments)]
pub fn build_objective<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &Network,
    vars: &[Var],
    x: &Tensor,
    labels: Labels,
    aux_x: Option<&Tensor>,
    prior: &PriorSpec,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<Objective, RegularizerError> {
    cfg.validate()?;
    let b = x.rows();
    if b == 0 || labels.len() != b {
        return Err(RegularizerError::EmptyBatch);
    }
    let k = net.spec().output_dim;
    prior.validate(k)?;
    if x.cols() != net.spec().input_dim {
        return Err(NetworkError::Dimension { expected: net.spec().input_dim, got: x.cols() }.into());
    }
    let aux_x = match aux_x {
        Some(a) if a.rows() > 0 => Some(a),
        _ if cfg.eta_aux > 0.0 => return Err(RegularizerError::MissingAux),
        _ => None,
    };

    let eps = standard_normal(rng, cfg.m * b, k);
    let xv = g.constant(x.clone());
    let heads = net.heads_on_graph(g, vars, xv);
    let nll = mc_nll(g, heads.mu, heads.sigma2, labels, &eps, net.spec().noise_link);
    let reg = regularizer_graph(g, prior, heads.mu, heads.sigma2);
    let reg_term = g.scale(reg, cfg.eta);
    let mut total = g.add(nll, reg_term);

    let mut aux_reg = None;
    if cfg.eta_aux > 0.0 {
        if let Some(a) = aux_x {
            let av = g.constant(a.clone());
            let ah = net.heads_on_graph(g, vars, av);
            let ar = regularizer_graph(g, prior, ah.mu, ah.sigma2);
            let term = g.scale(ar, cfg.eta_aux);
            total = g.add(total, term);
            aux_reg = Some(ar);
        }
    }
    Ok(Objective { total, nll, reg, aux_reg })
}

/// Value of [`build_objective`] with fresh noise from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn total_objective<R: Rng + ?Sized>(
    net: &Network,
    x: &Tensor,
    labels: Labels,
    aux_x: Option<&Tensor>,
    prior: &PriorSpec,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<f64, RegularizerError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = net.params().iter().map(|p| g.constant(p.clone())).collect();
    let obj = build_objective(&mut g, net, &vars, x, labels, aux_x, prior, cfg, rng)?;
    Ok(g.value(obj.total).item())
}
