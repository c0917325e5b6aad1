//! Closed forms and estimators checked against quadrature and Monte-Carlo references.

mod common;

use nalgebra::{Cholesky, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use common::{gh_expect_2d, mean_se};
use vifo::data::{gen_blobs, gen_sinusoid, gen_two_moons, sample_aux, Dataset, Targets, Task};
use vifo::autodiff::Tensor;
use vifo::metrics::{ece, Binning};
use vifo::networks::Link;
use vifo::regularizers::kl_naive;
use vifo::theory::{linear_elbo_loss, random_spd, random_vector, LinearInstance};
use vifo::variational::{
    mc_nll_classification, mc_nll_regression, predictive_classification, predictive_regression_closed_form,
    CategoricalPrediction, RegressionHead, VariationalOutput,
};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn within(value: f64, (mean, se): (f64, f64), k: f64) -> bool {
    (value - mean).abs() <= k * se
}

/// Batch means of an estimator: `batches` independent runs of `per` draws each.
fn batch_means(batches: usize, mut run: impl FnMut() -> f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..batches).map(|_| run()).collect();
    mean_se(&xs)
}

fn ln_1p_exp(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[test]
fn classification_nll_matches_quadrature() {
    let q = VariationalOutput::new(vec![1.0, 0.0], vec![1.0, 1.0]).unwrap();
    let exact = gh_expect_2d(60, |a, b| ln_1p_exp(b - (1.0 + a)));
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let est = batch_means(100, || mc_nll_classification(&q, 0, 10_000, &mut rng).unwrap());
    assert!(within(exact, est, 3.0), "quadrature {exact} vs MC {est:?}");
}

#[test]
fn regression_nll_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for link in [Link::Softplus, Link::Exp] {
        let h = RegressionHead {
            mu_m: normal(&mut rng),
            sigma2_m: rng.random_range(0.1..1.0),
            mu_l: rng.random_range(-0.5..0.5),
            sigma2_l: rng.random_range(0.05..0.5),
        };
        let y = normal(&mut rng);
        let exact = gh_expect_2d(60, |a, b| {
            let m = h.mu_m + h.sigma2_m.sqrt() * a;
            let v = link.apply(h.mu_l + h.sigma2_l.sqrt() * b);
            0.5 * (2.0 * std::f64::consts::PI * v).ln() + (y - m).powi(2) / (2.0 * v)
        });
        let est = batch_means(100, || mc_nll_regression(&h, y, 10_000, &mut rng, link));
        assert!(within(exact, est, 3.0), "{link:?}: quadrature {exact} vs MC {est:?}");
    }
}

#[test]
fn predictive_classification_matches_quadrature() {
    let q = VariationalOutput::new(vec![1.0, 0.0], vec![1.0, 1.0]).unwrap();
    let exact = gh_expect_2d(60, |a, b| 1.0 / (1.0 + (b - 1.0 - a).exp()));
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let est = batch_means(100, || predictive_classification(&q, 10_000, &mut rng).probs()[0]);
    assert!(within(exact, est, 3.0), "quadrature {exact} vs MC {est:?}");

    let sym = VariationalOutput::new(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
    let p = predictive_classification(&sym, 100_000, &mut rng);
    assert!((p.probs()[0] - 0.5).abs() < 0.01);
    assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

/// Sample variance of `y = m + √exp(l) ε` and the standard error of that variance.
fn mc_predictive_variance(h: &RegressionHead, draws: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let ys: Vec<f64> = (0..draws)
        .map(|_| {
            let m = h.mu_m + h.sigma2_m.sqrt() * normal(rng);
            let l = h.mu_l + h.sigma2_l.sqrt() * normal(rng);
            m + (0.5 * l).exp() * normal(rng)
        })
        .collect();
    let n = draws as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let m2 = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let m4 = ys.iter().map(|y| (y - mean).powi(4)).sum::<f64>() / n;
    (m2 * n / (n - 1.0), ((m4 - m2 * m2) / n).sqrt())
}

#[test]
fn closed_form_predictive_variance_matches_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut misses = 0;
    for _ in 0..50 {
        let h = RegressionHead {
            mu_m: normal(&mut rng),
            sigma2_m: rng.random_range(0.05..2.0),
            mu_l: rng.random_range(-1.0..1.0),
            sigma2_l: rng.random_range(0.01..0.5),
        };
        let (_, var) = predictive_regression_closed_form(&h, Link::Exp).unwrap();
        let est = mc_predictive_variance(&h, 200_000, &mut rng);
        misses += usize::from(!within(var, est, 3.0));
    }
    // 3-SE bands cover about 99.7%; allow the odd excursion among 50 heads.
    assert!(misses <= 2, "{misses} of 50 heads outside 3 SE");

    let h = RegressionHead { mu_m: 0.3, sigma2_m: 0.5, mu_l: -0.2, sigma2_l: 0.3 };
    let (_, var) = predictive_regression_closed_form(&h, Link::Exp).unwrap();
    let est = mc_predictive_variance(&h, 10_000_000, &mut rng);
    assert!(within(var, est, 3.0), "closed {var} vs MC {est:?}");
}

#[test]
fn naive_kl_is_nonnegative_and_zero_only_at_prior() {
    for mu in [-2.0, -0.5, 0.0, 0.5, 2.0] {
        for s2 in [0.1, 0.5, 1.0, 2.0, 5.0] {
            for v in [0.1, 1.0, 5.0] {
                let kl = kl_naive(&VariationalOutput::new(vec![mu], vec![s2]).unwrap(), &[0.0], v);
                assert!(kl >= 0.0);
                assert_eq!(kl == 0.0, mu == 0.0 && s2 == v, "mu {mu} s2 {s2} v {v}: {kl}");
            }
        }
    }
}

#[test]
fn linear_expected_log_likelihood_matches_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let inst = LinearInstance::random(3, 12, &mut rng).unwrap();
    let m = random_vector(3, &mut rng);
    let s = random_spd(3, &mut rng);
    let l = Cholesky::new(s.clone()).unwrap().l();
    let c = -0.5 * (2.0 * std::f64::consts::PI / inst.beta).ln();
    let draws: Vec<f64> = (0..200_000)
        .map(|_| {
            let theta = &m + &l * DVector::from_fn(3, |_, _| normal(&mut rng));
            let r = &inst.y - inst.x.transpose() * theta;
            inst.n() as f64 * c - 0.5 * inst.beta * r.norm_squared()
        })
        .collect();
    let exact = linear_elbo_loss(&m, &s, &inst).unwrap();
    assert!(within(exact, mean_se(&draws), 3.0));
}

// ---- data generators ----

#[test]
fn sinusoid_residual_moments() {
    let ds = gen_sinusoid(100_000, 0.1, 36).unwrap();
    let Targets::Values(y) = ds.targets() else { panic!("regression targets") };
    let resid: Vec<f64> = ds.x().data().iter().zip(y).map(|(x, y)| y - 2.0 * x.sin()).collect();
    let (mean, se) = mean_se(&resid);
    assert!(mean.abs() <= 3.0 * se);
    let n = resid.len() as f64;
    let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    // SE of a Gaussian sample standard deviation is σ / √(2(n−1)).
    assert!((sd - 0.1).abs() <= 3.0 * 0.1 / (2.0 * (n - 1.0)).sqrt(), "sd {sd}");
}

fn column_moments(ds: &Dataset, rows: impl Iterator<Item = usize> + Clone, col: usize) -> (f64, f64) {
    let xs: Vec<f64> = rows.map(|i| ds.x().get2(i, col)).collect();
    mean_se(&xs)
}

#[test]
fn blob_class_means_sit_on_the_circle() {
    let (k, r) = (4, 3.0);
    let ds = gen_blobs(100_000, k, r, 0.7, 37).unwrap();
    for c in 0..k {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
        let rows = (c..ds.n()).step_by(k);
        assert!(within(r * angle.cos(), column_moments(&ds, rows.clone(), 0), 3.0));
        assert!(within(r * angle.sin(), column_moments(&ds, rows, 1), 3.0));
    }
}

#[test]
fn two_moons_moments() {
    let ds = gen_two_moons(100_000, 0.1, 38).unwrap();
    let two_over_pi = 2.0 / std::f64::consts::PI;
    let upper = (0..ds.n()).step_by(2);
    let lower = (1..ds.n()).step_by(2);
    assert!(within(0.0, column_moments(&ds, upper.clone(), 0), 3.0));
    assert!(within(two_over_pi, column_moments(&ds, upper, 1), 3.0));
    assert!(within(1.0, column_moments(&ds, lower.clone(), 0), 3.0));
    assert!(within(0.5 - two_over_pi, column_moments(&ds, lower, 1), 3.0));
}

#[test]
fn aux_samples_cover_the_widened_box() {
    let x = Tensor::matrix(3, 2, vec![0.0, 2.0, 0.5, 2.0, 1.0, 2.0]).unwrap();
    let ds = Dataset::new(x, Targets::Values(vec![0.0; 3]), Task::Regression).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(39);
    let m = 100_000;
    let aux = sample_aux(&ds, m, &mut rng);
    let col = |j: usize| (0..m).map(|i| aux.get2(i, j)).collect::<Vec<_>>();
    let (a, b) = (col(0), col(1));
    assert!(a.iter().all(|&v| (-0.5..=1.5).contains(&v)));
    assert!(b.iter().all(|&v| (1.5..=2.5).contains(&v)));
    assert!(a.iter().copied().fold(f64::INFINITY, f64::min) < -0.49);
    assert!(a.iter().copied().fold(f64::NEG_INFINITY, f64::max) > 1.49);
    assert!(within(0.5, mean_se(&a), 3.0));
    let outside = a.iter().filter(|&&v| !(0.0..=1.0).contains(&v)).count() as f64 / m as f64;
    assert!((outside - 0.5).abs() <= 3.0 * (0.25 / m as f64).sqrt(), "outside fraction {outside}");
}

#[test]
fn calibrated_simulator_has_small_ece() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let n = 100_000;
    let mut preds = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let p: f64 = rng.random_range(0.5..1.0);
        preds.push(CategoricalPrediction::new(vec![p, 1.0 - p]).unwrap());
        labels.push(usize::from(!rng.random_bool(p)));
    }
    let e = ece(&preds, &labels, 20, Binning::EqualWidth).unwrap();
    assert!(e < 0.02, "ECE {e}");
}
