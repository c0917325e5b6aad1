//! The variational output distribution `q(z|x) = N(μ_q(x), diag σ²_q(x))`,
//! Monte-Carlo likelihood losses, and predictive distributions.
//!
//! Graph-level losses take the standard-normal noise `ε` as an explicit
//! `[M·B, K]` tensor (row `m·B + b` is draw `m` for example `b`), so a test can
//! freeze `ε` and differentiate through `μ` and `σ²`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{logsumexp, Graph, Tensor, Var};
use crate::networks::Link;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VariationalError {
    #[error("mean has {mu} entries but variance has {sigma2}")]
    LengthMismatch { mu: usize, sigma2: usize },
    #[error("variances must be strictly positive and finite")]
    NonPositiveVariance,
    #[error("output dimension must be at least 1")]
    Empty,
    #[error("class index {y} out of range for {k} classes")]
    BadLabel { y: usize, k: usize },
    #[error("probabilities must be non-negative and sum to 1")]
    NotOnSimplex,
    #[error("cannot average an empty ensemble")]
    EmptyEnsemble,
    #[error("ensemble members disagree on the number of classes")]
    ClassCountMismatch,
    #[error("closed-form regression predictive needs the exp link, got {0:?}")]
    UnsupportedLink(Link),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalOutput {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl VariationalOutput {
    pub fn new(mu: Vec<f64>, sigma2: Vec<f64>) -> Result<Self, VariationalError> {
        if mu.len() != sigma2.len() {
            return Err(VariationalError::LengthMismatch {
                mu: mu.len(),
                sigma2: sigma2.len(),
            });
        }
        if mu.is_empty() {
            return Err(VariationalError::Empty);
        }
        if sigma2.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VariationalError::NonPositiveVariance);
        }
        Ok(Self { mu, sigma2 })
    }

    pub fn k(&self) -> usize {
        self.mu.len()
    }

    /// Row `i` of batched head outputs.
    pub fn from_rows(mu: &Tensor, sigma2: &Tensor, i: usize) -> Self {
        Self {
            mu: mu.row(i).to_vec(),
            sigma2: sigma2.row(i).to_vec(),
        }
    }

    pub fn to_tensors(&self) -> (Tensor, Tensor) {
        let k = self.k();
        (
            Tensor::matrix(1, k, self.mu.clone()).expect("1 x k"),
            Tensor::matrix(1, k, self.sigma2.clone()).expect("1 x k"),
        )
    }
}

/// Four outputs of a regression model: mean and variance of the location `m`
/// and of the scale logit `l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionHead {
    pub mu_m: f64,
    pub sigma2_m: f64,
    pub mu_l: f64,
    pub sigma2_l: f64,
}

impl RegressionHead {
    pub fn as_output(&self) -> VariationalOutput {
        VariationalOutput {
            mu: vec![self.mu_m, self.mu_l],
            sigma2: vec![self.sigma2_m, self.sigma2_l],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalPrediction {
    probs: Vec<f64>,
}

impl CategoricalPrediction {
    pub fn new(probs: Vec<f64>) -> Result<Self, VariationalError> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(VariationalError::NotOnSimplex);
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    /// Maximum predicted probability.
    pub fn confidence(&self) -> f64 {
        self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the most probable class (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `[rows, cols]` tensor of independent standard-normal draws.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("rows x cols")
}

/// `M` reparametrized draws `z = μ + √σ² ⊙ ε`.
pub fn sample_z<R: Rng + ?Sized>(q: &VariationalOutput, m: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| {
            q.mu
                .iter()
                .zip(&q.sigma2)
                .map(|(&mu, &s2)| mu + s2.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// `z = tile(μ) + tile(√σ²) ⊙ ε` with `ε` of shape `[M·B, K]`.
pub fn reparametrize(g: &mut Graph, mu: Var, sigma2: Var, eps: &Tensor) -> Var {
    let b = g.shape(mu)[0];
    let reps = eps.rows() / b;
    assert_eq!(reps * b, eps.rows(), "noise rows must be a multiple of the batch");
    let sd = g.sqrt(sigma2);
    let mu_t = g.tile_rows(mu, reps);
    let sd_t = g.tile_rows(sd, reps);
    let e = g.constant(eps.clone());
    let noise = g.mul(sd_t, e);
    g.add(mu_t, noise)
}

fn tiled<T: Clone>(v: &[T], reps: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(v.len() * reps);
    for _ in 0..reps {
        out.extend_from_slice(v);
    }
    out
}

/// Cross-entropy of logits `[N, K]` against labels, averaged over rows.
pub fn softmax_nll(g: &mut Graph, logits: Var, labels: &[usize]) -> Var {
    let lse = g.logsumexp(logits);
    let picked = g.pick(logits, labels);
    let per = g.sub(lse, picked);
    g.mean(per)
}

/// Mean over the batch and the `M` draws of `−z_y + logsumexp(z)`.
pub fn classification_nll(
    g: &mut Graph,
    mu: Var,
    sigma2: Var,
    labels: &[usize],
    eps: &Tensor,
) -> Var {
    let z = reparametrize(g, mu, sigma2, eps);
    let reps = eps.rows() / labels.len();
    softmax_nll(g, z, &tiled(labels, reps))
}

/// Gaussian NLL `½ log(2π g(l)) + (y − m)² / (2 g(l))` of a `[N, 2]` output `(m, l)`, averaged.
pub fn gaussian_nll(g: &mut Graph, out: Var, targets: &[f64], link: Link) -> Var {
    let n = g.shape(out)[0];
    let m = g.slice_cols(out, 0, 1);
    let m = g.reshape(m, &[n]);
    let l = g.slice_cols(out, 1, 2);
    let l = g.reshape(l, &[n]);
    let var = link.apply_graph(g, l);
    let y = g.constant(Tensor::vector(targets.to_vec()));
    let r = g.sub(y, m);
    let r2 = g.square(r);
    let quad = g.div(r2, var);
    let quad = g.scale(quad, 0.5);
    let logv = g.log(var);
    let logv = g.scale(logv, 0.5);
    let per = g.add(logv, quad);
    let per = g.add_scalar(per, HALF_LN_2PI);
    g.mean(per)
}

/// Borrowed supervision for a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Labels<'a> {
    Classes(&'a [usize]),
    Values(&'a [f64]),
}

impl Labels<'_> {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Monte-Carlo NLL for either task.
pub fn mc_nll(g: &mut Graph, mu: Var, sigma2: Var, labels: Labels, eps: &Tensor, link: Link) -> Var {
    match labels {
        Labels::Classes(c) => classification_nll(g, mu, sigma2, c, eps),
        Labels::Values(v) => regression_nll(g, mu, sigma2, v, eps, link),
    }
}

/// Likelihood of a deterministic network output.
pub fn point_nll(g: &mut Graph, out: Var, labels: Labels, link: Link) -> Var {
    match labels {
        Labels::Classes(c) => softmax_nll(g, out, c),
        Labels::Values(v) => gaussian_nll(g, out, v, link),
    }
}

/// Monte-Carlo regression NLL with `(m, l)` sampled from the four-output head.
pub fn regression_nll(
    g: &mut Graph,
    mu: Var,
    sigma2: Var,
    targets: &[f64],
    eps: &Tensor,
    link: Link,
) -> Var {
    let z = reparametrize(g, mu, sigma2, eps);
    let reps = eps.rows() / targets.len();
    gaussian_nll(g, z, &tiled(targets, reps), link)
}

pub fn mc_nll_classification<R: Rng + ?Sized>(
    q: &VariationalOutput,
    y: usize,
    m: usize,
    rng: &mut R,
) -> Result<f64, VariationalError> {
    if y >= q.k() {
        return Err(VariationalError::BadLabel { y, k: q.k() });
    }
    let eps = standard_normal(rng, m, q.k());
    let mut g = Graph::new();
    let (mu, s2) = q.to_tensors();
    let mu = g.constant(mu);
    let s2 = g.constant(s2);
    let loss = classification_nll(&mut g, mu, s2, &[y], &eps);
    Ok(g.value(loss).item())
}

pub fn mc_nll_regression<R: Rng + ?Sized>(
    h: &RegressionHead,
    y: f64,
    m: usize,
    rng: &mut R,
    link: Link,
) -> f64 {
    let eps = standard_normal(rng, m, 2);
    let mut g = Graph::new();
    let (mu, s2) = h.as_output().to_tensors();
    let mu = g.constant(mu);
    let s2 = g.constant(s2);
    let loss = regression_nll(&mut g, mu, s2, &[y], &eps, link);
    g.value(loss).item()
}

/// `E_q[softmax(z)]` estimated with `M` draws.
pub fn predictive_classification<R: Rng + ?Sized>(
    q: &VariationalOutput,
    m: usize,
    rng: &mut R,
) -> CategoricalPrediction {
    let k = q.k();
    let sd: Vec<f64> = q.sigma2.iter().map(|s| s.sqrt()).collect();
    let mut acc = vec![0.0; k];
    let mut z = vec![0.0; k];
    for _ in 0..m {
        for j in 0..k {
            z[j] = q.mu[j] + sd[j] * rng.sample::<f64, _>(StandardNormal);
        }
        let lse = logsumexp(&z).expect("k >= 1");
        for j in 0..k {
            acc[j] += (z[j] - lse).exp();
        }
    }
    acc.iter_mut().for_each(|p| *p /= m as f64);
    CategoricalPrediction { probs: acc }
}

/// `N(μ_m, σ²_m + exp(μ_l + σ²_l / 2))`, exact for the exp link.
pub fn predictive_regression_closed_form(
    h: &RegressionHead,
    link: Link,
) -> Result<(f64, f64), VariationalError> {
    if link != Link::Exp {
        return Err(VariationalError::UnsupportedLink(link));
    }
    Ok((h.mu_m, h.sigma2_m + (h.mu_l + 0.5 * h.sigma2_l).exp()))
}

/// Predictive mean and variance of `y` by sampling `l`; used for links without a closed form.
pub fn predictive_regression_mc<R: Rng + ?Sized>(
    h: &RegressionHead,
    link: Link,
    m: usize,
    rng: &mut R,
) -> (f64, f64) {
    let sd = h.sigma2_l.sqrt();
    let mean_noise: f64 = (0..m)
        .map(|_| link.apply(h.mu_l + sd * rng.sample::<f64, _>(StandardNormal)))
        .sum::<f64>()
        / m as f64;
    (h.mu_m, h.sigma2_m + mean_noise)
}

pub fn ensemble_predict(
    members: &[CategoricalPrediction],
) -> Result<CategoricalPrediction, VariationalError> {
    let first = members.first().ok_or(VariationalError::EmptyEnsemble)?;
    let k = first.k();
    if members.iter().any(|m| m.k() != k) {
        return Err(VariationalError::ClassCountMismatch);
    }
    let mut probs = vec![0.0; k];
    for m in members {
        for (p, &q) in probs.iter_mut().zip(&m.probs) {
            *p += q;
        }
    }
    probs.iter_mut().for_each(|p| *p /= members.len() as f64);
    Ok(CategoricalPrediction { probs })
}
