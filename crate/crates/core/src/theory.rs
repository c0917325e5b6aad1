//! Numerical checks of the theory behind output-space VI.
//!
//! * Bayesian linear regression: the output-space objective with the correlated
//!   prior differs from the weight-space ELBO by a constant.
//! * One-hidden-unit ReLU moments, showing the predictive mean of a stochastic
//!   ReLU net is not reachable by a deterministic single unit.
//! * Direct two-term evaluations of every collapsed regularizer, used as
//!   independent oracles for the closed forms in [`crate::regularizers`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

use crate::variational::VariationalOutput;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TheoryError {
    #[error("{0} is not symmetric positive definite")]
    NotSpd(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("instance needs N > d, got N = {n}, d = {d}")]
    TooFewPoints { n: usize, d: usize },
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Bayesian linear regression `y ~ N(θᵀx, 1/β)`, `θ ~ N(m0, S0)`; columns of `x` are points.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearInstance {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub m0: DVector<f64>,
    pub s0: DMatrix<f64>,
    pub beta: f64,
}

pub fn random_spd<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.2
}

pub fn random_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

impl LinearInstance {
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        m0: DVector<f64>,
        s0: DMatrix<f64>,
        beta: f64,
    ) -> Result<Self, TheoryError> {
        let (d, n) = x.shape();
        if n <= d {
            return Err(TheoryError::TooFewPoints { n, d });
        }
        if y.len() != n || m0.len() != d || s0.shape() != (d, d) {
            return Err(TheoryError::Dimension(format!(
                "x is {d}x{n}, y has {}, m0 has {}, S0 is {:?}",
                y.len(),
                m0.len(),
                s0.shape()
            )));
        }
        if !(beta > 0.0) {
            return Err(TheoryError::Dimension("beta must be positive".into()));
        }
        check_spd(&s0, "S0")?;
        Ok(Self { x, y, m0, s0, beta })
    }

    pub fn random<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Result<Self, TheoryError> {
        let x = DMatrix::from_fn(d, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let theta = random_vector(d, rng);
        let y = x.transpose() * &theta + random_vector(n, rng) * 0.3;
        let beta = rng.random_range(0.5..4.0);
        Self::new(x, y, random_vector(d, rng) * 0.5, random_spd(d, rng), beta)
    }

    pub fn d(&self) -> usize {
        self.x.nrows()
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }
}

fn check_spd(m: &DMatrix<f64>, name: &'static str) -> Result<(), TheoryError> {
    let sym = (m - m.transpose()).amax() <= 1e-10 * m.amax().max(1.0);
    if !sym || m.clone().cholesky().is_none() {
        return Err(TheoryError::NotSpd(name));
    }
    Ok(())
}

fn spd_inverse(m: &DMatrix<f64>, name: &'static str) -> Result<DMatrix<f64>, TheoryError> {
    m.clone().cholesky().map(|c| c.inverse()).ok_or(TheoryError::NotSpd(name))
}

fn log_det_spd(m: &DMatrix<f64>, name: &'static str) -> Result<f64, TheoryError> {
    let c = m.clone().cholesky().ok_or(TheoryError::NotSpd(name))?;
    Ok(2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Expected log-likelihood under `θ ~ N(m, S)`, summed over points, using the
/// trace identity `Σ xᵢᵀ S xᵢ = tr(S X Xᵀ)`.
pub fn linear_elbo_loss(m: &DVector<f64>, s: &DMatrix<f64>, inst: &LinearInstance) -> Result<f64, TheoryError> {
    check_spd(s, "S")?;
    let n = inst.n() as f64;
    let resid = &inst.y - inst.x.transpose() * m;
    let xxt = &inst.x * inst.x.transpose();
    let tr = (s * xxt).trace();
    Ok(-0.5 * n * (2.0 * std::f64::consts::PI / inst.beta).ln() - 0.5 * inst.beta * (resid.norm_squared() + tr))
}

/// `KL(N(m, S) ‖ N(m0, S0))` in weight space.
pub fn weight_kl(m: &DVector<f64>, s: &DMatrix<f64>, inst: &LinearInstance) -> Result<f64, TheoryError> {
    let s0_inv = spd_inverse(&inst.s0, "S0")?;
    let dm = m - &inst.m0;
    let d = inst.d() as f64;
    let log_ratio = log_det_spd(s, "S")? - log_det_spd(&inst.s0, "S0")?;
    Ok(0.5 * ((&s0_inv * s).trace() - log_ratio + (dm.transpose() * &s0_inv * &dm)[(0, 0)] - d))
}

pub fn linear_elbo(m: &DVector<f64>, s: &DMatrix<f64>, inst: &LinearInstance) -> Result<f64, TheoryError> {
    Ok(linear_elbo_loss(m, s, inst)? - weight_kl(m, s, inst)?)
}

/// Expected log-likelihood summed over points with `z_i ~ N(wᵀxᵢ, xᵢᵀVxᵢ)` per point.
pub fn linear_vifo_loss(w: &DVector<f64>, v: &DMatrix<f64>, inst: &LinearInstance) -> Result<f64, TheoryError> {
    check_spd(v, "V")?;
    let c = -0.5 * (2.0 * std::f64::consts::PI / inst.beta).ln();
    Ok(inst
        .x
        .column_iter()
        .zip(inst.y.iter())
        .map(|(xi, &yi)| {
            let mu = w.dot(&xi);
            let var = (xi.transpose() * v * xi)[(0, 0)];
            c - 0.5 * inst.beta * ((yi - mu).powi(2) + var)
        })
        .sum())
}

/// The `d`-dimensional form of the correlated output-space KL, keeping the `−N/2` constant.
pub fn simplified_correlated_kl(w: &DVector<f64>, v: &DMatrix<f64>, inst: &LinearInstance) -> Result<f64, TheoryError> {
    let s0_inv = spd_inverse(&inst.s0, "S0")?;
    let dw = w - &inst.m0;
    let log_det = log_det_spd(v, "V")? - log_det_spd(&inst.s0, "S0")?;
    Ok(0.5 * ((&s0_inv * v).trace() - log_det + (dw.transpose() * &s0_inv * &dw)[(0, 0)] - inst.n() as f64))
}

pub fn linear_vifo_objective(w: &DVector<f64>, v: &DMatrix<f64>, inst: &LinearInstance) -> Result<f64, TheoryError> {
    Ok(linear_vifo_loss(w, v, inst)? - simplified_correlated_kl(w, v, inst)?)
}

/// Terms of the `N`-dimensional rank-deficient KL.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelatedKl {
    pub trace: f64,
    pub log_pdet: f64,
    pub quad: f64,
    pub value: f64,
    /// Eigenvalues of the product above the relative threshold.
    pub nonzero_eigs: usize,
}

pub const PINV_REL_THRESHOLD: f64 = 1e-10;

/// KL between the induced `N`-dimensional Gaussians over `z = Xᵀθ`, using the
/// pseudo-inverse of `XᵀS0X` and the pseudo-determinant of `(XᵀS0X)⁺(XᵀVX)`.
pub fn correlated_kl_direct(w: &DVector<f64>, v: &DMatrix<f64>, inst: &LinearInstance) -> Result<CorrelatedKl, TheoryError> {
    check_spd(v, "V")?;
    let n = inst.n();
    let x = &inst.x;
    let a = x.transpose() * &inst.s0 * x;
    let b = x.transpose() * v * x;
    let a = (&a + a.transpose()) * 0.5;
    let b = (&b + b.transpose()) * 0.5;

    let eig = SymmetricEigen::new(a);
    let lmax = eig.eigenvalues.amax();
    let thresh = PINV_REL_THRESHOLD * lmax;
    let mut inv_diag = DVector::zeros(n);
    let mut inv_sqrt_diag = DVector::zeros(n);
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l > thresh {
            inv_diag[i] = 1.0 / l;
            inv_sqrt_diag[i] = 1.0 / l.sqrt();
        }
    }
    let u = &eig.eigenvectors;
    let a_pinv = u * DMatrix::from_diagonal(&inv_diag) * u.transpose();
    let r = u * DMatrix::from_diagonal(&inv_sqrt_diag) * u.transpose();

    let trace = (&a_pinv * &b).trace();
    // nonzero spectrum of A⁺B equals that of R B R with R = (A⁺)^½
    let rbr = &r * &b * &r;
    let rbr = (&rbr + rbr.transpose()) * 0.5;
    let eigs = SymmetricEigen::new(rbr).eigenvalues;
    let emax = eigs.amax();
    let kept: Vec<f64> = eigs.iter().copied().filter(|&e| e > PINV_REL_THRESHOLD * emax).collect();
    let log_pdet = kept.iter().map(|e| e.ln()).sum::<f64>();
    let delta = x.transpose() * (w - &inst.m0);
    let quad = (delta.transpose() * &a_pinv * &delta)[(0, 0)];
    let value = 0.5 * trace - 0.5 * log_pdet + 0.5 * quad - 0.5 * n as f64;
    Ok(CorrelatedKl { trace, log_pdet, quad, value, nonzero_eigs: kept.len() })
}

/// `E[w̄ · relu(u · x1)]` for `u ~ N(ū, σ²)`.
pub fn relu_moment(w_bar: f64, u_bar: f64, sigma_u: f64, x1: f64) -> f64 {
    let r = u_bar / sigma_u;
    if x1 >= 0.0 {
        w_bar * (u_bar * (1.0 - normal_cdf(-r)) + sigma_u * normal_pdf(r)) * x1
    } else {
        w_bar * (u_bar * normal_cdf(-r) - sigma_u * normal_pdf(r)) * x1
    }
}

/// Outputs `(f(1), f(−1))` of the deterministic unit `f(x1) = w̃ · relu(ũ · x1)`.
pub fn single_relu_unit(w_tilde: f64, u_tilde: f64) -> (f64, f64) {
    (w_tilde * u_tilde.max(0.0), w_tilde * (-u_tilde).max(0.0))
}

/// Two-term collapsed objective for a fixed prior variance `γ` and prior-mean
/// prior `N(0, α)`, summed over the batch with one shared candidate
/// `q(μ_p) = N(mean, var·I)`.
pub fn collapsed_mean_direct(batch: &[VariationalOutput], gamma: f64, alpha: f64, mean: &[f64], var: f64) -> f64 {
    let term2: f64 = 0.5
        * mean
            .iter()
            .map(|&m| var / alpha + m * m / alpha - 1.0 + (alpha / var).ln())
            .sum::<f64>();
    batch
        .iter()
        .map(|q| {
            let term1: f64 = q
                .mu
                .iter()
                .zip(&q.sigma2)
                .zip(mean)
                .map(|((&mu, &s2), &m)| {
                    let e_sq = (mu - m).powi(2) + var;
                    0.5 * ((gamma / s2).ln() - 1.0 + (s2 + e_sq) / gamma)
                })
                .sum();
            term1 + term2
        })
        .sum()
}

/// Optimal shared `q(μ_p)`: mean `α/(α+γ)` times the batch-mean of `μ_q`, variance `αγ/(α+γ)`.
pub fn collapsed_mean_posterior(batch: &[VariationalOutput], gamma: f64, alpha: f64) -> (Vec<f64>, f64) {
    let k = batch[0].k();
    let n = batch.len() as f64;
    let c = alpha / (alpha + gamma);
    let mean = (0..k).map(|j| c * batch.iter().map(|q| q.mu[j]).sum::<f64>() / n).collect();
    (mean, alpha * gamma / (alpha + gamma))
}

/// KL between inverse-gamma distributions `IG(a1, b1) ‖ IG(a2, b2)`.
pub fn inverse_gamma_kl(a1: f64, b1: f64, a2: f64, b2: f64) -> f64 {
    (a1 - a2) * digamma(a1) - ln_gamma(a1) + ln_gamma(a2) + a2 * (b1.ln() - b2.ln()) + a1 * (b2 - b1) / b1
}

/// Two-term collapsed objective for the normal / inverse-gamma prior evaluated at its optimum.
///
/// `q(μ_p | σ_p², x) = N(μ_q(x)/(t+1), σ_p²/(t+1))` per example; `q(σ_p²)` is
/// `IG(α + ½, B)` with `B` built per example or, when `shared`, from batch means.
pub fn collapsed_mv_direct(batch: &[VariationalOutput], alpha: f64, beta: f64, delta: f64, shared: bool) -> f64 {
    let t = delta / (1.0 - delta);
    let a_post = alpha + 0.5;
    let k = batch[0].k();
    let n = batch.len() as f64;
    let shared_b: Vec<f64> = (0..k)
        .map(|j| {
            let m2 = batch.iter().map(|q| q.mu[j].powi(2)).sum::<f64>() / n;
            let s2 = batch.iter().map(|q| q.sigma2[j]).sum::<f64>() / n;
            beta + t * m2 / (2.0 * (t + 1.0)) + 0.5 * s2
        })
        .collect();
    batch
        .iter()
        .map(|q| {
            (0..k)
                .map(|j| {
                    let (mu, s2) = (q.mu[j], q.sigma2[j]);
                    let b = if shared {
                        shared_b[j]
                    } else {
                        beta + t * mu * mu / (2.0 * (t + 1.0)) + 0.5 * s2
                    };
                    let e_log = b.ln() - digamma(a_post);
                    let e_inv = a_post / b;
                    let m1 = mu / (t + 1.0);
                    let shift = t * mu / (t + 1.0);
                    let term1 = 0.5 * (e_log - s2.ln() - 1.0 + (s2 + shift * shift) * e_inv + 1.0 / (t + 1.0));
                    let cond = 0.5 * (((t + 1.0) / t).ln() - 1.0 + t / (t + 1.0) + t * m1 * m1 * e_inv);
                    term1 + cond + inverse_gamma_kl(a_post, b, alpha, beta)
                })
                .sum::<f64>()
        })
        .sum()
}

/// Candidate parameters of the normal / inverse-gamma hyper-posterior for one
/// example: per dimension `q(μ_p | σ_p²) = N(mean[j], c · σ_p²)` and
/// `q(σ_p²) = IG(a, b[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct MvCandidate {
    pub mean: Vec<f64>,
    pub c: f64,
    pub a: f64,
    pub b: Vec<f64>,
}

impl MvCandidate {
    /// The analytic optimum for `q`.
    pub fn optimal(q: &VariationalOutput, alpha: f64, beta: f64, delta: f64) -> Self {
        let t = delta / (1.0 - delta);
        Self {
            mean: q.mu.iter().map(|m| m / (t + 1.0)).collect(),
            c: 1.0 / (t + 1.0),
            a: alpha + 0.5,
            b: q.mu
                .iter()
                .zip(&q.sigma2)
                .map(|(&m, &s2)| beta + t * m * m / (2.0 * (t + 1.0)) + 0.5 * s2)
                .collect(),
        }
    }
}

/// Two-term collapsed objective for the normal / inverse-gamma prior
/// (`μ_p | σ_p² ~ N(0, σ_p²/t)`, `t = δ/(1−δ)`, `σ_p² ~ IG(α, β)`) at an arbitrary candidate.
pub fn collapsed_mv_candidate(q: &VariationalOutput, alpha: f64, beta: f64, delta: f64, cand: &MvCandidate) -> f64 {
    let t = delta / (1.0 - delta);
    (0..q.k())
        .map(|j| {
            let (mu, s2) = (q.mu[j], q.sigma2[j]);
            let (m, b) = (cand.mean[j], cand.b[j]);
            let e_log = b.ln() - digamma(cand.a);
            let e_inv = cand.a / b;
            let term1 = 0.5 * (e_log - s2.ln() - 1.0 + (s2 + (mu - m).powi(2)) * e_inv + cand.c);
            let cond = 0.5 * (-(t * cand.c).ln() - 1.0 + t * cand.c + t * m * m * e_inv);
            term1 + cond + inverse_gamma_kl(cand.a, b, alpha, beta)
        })
        .sum()
}

/// `KL(q ‖ N(0, s·I))` written per dimension as `½ log(s/σ²) + (σ² + μ²)/(2s) − ½`.
pub fn kl_to_isotropic(q: &VariationalOutput, s: f64) -> f64 {
    q.mu
        .iter()
        .zip(&q.sigma2)
        .map(|(&m, &v)| 0.5 * (s / v).ln() + (v + m * m) / (2.0 * s) - 0.5)
        .sum()
}

/// KL to `N(0, sI)` plus the negative log inverse-gamma prior on `s` (up to constants).
pub fn eb_direct_objective(q: &VariationalOutput, alpha: f64, beta: f64, s: f64) -> f64 {
    kl_to_isotropic(q, s) + (alpha + 1.0) * s.ln() + beta / s
}

/// Minimizer of a unimodal function on `[lo, hi]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while (hi - lo).abs() > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Numeric minimizer of [`eb_direct_objective`] over `s`, searched in log space.
pub fn eb_numeric_optimum(q: &VariationalOutput, alpha: f64, beta: f64) -> f64 {
    let f = |ls: f64| eb_direct_objective(q, alpha, beta, ls.exp());
    golden_section(f, -30.0, 30.0, 1e-12).exp()
}
