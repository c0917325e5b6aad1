//! Reference computations shared by the integration tests. Everything here is
//! written from the definitions, without calling the library routine under test.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use vifo::autodiff::Tensor;

/// Central finite-difference gradient of `f` with respect to every entry of `params`.
pub fn fd_gradient(f: &dyn Fn(&[Tensor]) -> f64, params: &[Tensor], h: f64) -> Vec<Tensor> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut g = vec![0.0; params[i].len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = f(&work);
            work[i].data_mut()[j] = orig - h;
            let down = f(&work);
            work[i].data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * h);
        }
        out.push(Tensor::new(params[i].shape().to_vec(), g).unwrap());
    }
    out
}

/// Relative gradient error below which an entry counts as agreeing. Entries
/// whose magnitude is under `FD_FLOOR` are compared absolutely against it.
pub const FD_FLOOR: f64 = 1e-6;

/// Largest entrywise `|a − b| / max(|a|, |b|, FD_FLOOR)`.
pub fn max_rel_err(ad: &[Tensor], fd: &[Tensor]) -> f64 {
    ad.iter()
        .zip(fd)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(&x, &y)| (x, y)))
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(FD_FLOOR))
        .fold(0.0, f64::max)
}

/// Nodes and weights for `E[f(Z)]`, `Z ~ N(0, 1)`: Gauss–Hermite via the Golub–Welsch eigenproblem.
pub fn gauss_hermite_normal(n: usize) -> Vec<(f64, f64)> {
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(j);
    (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i] * std::f64::consts::SQRT_2, v0 * v0)
        })
        .collect()
}

/// `E[f(Z₁, Z₂)]` for independent standard normals by tensor-product Gauss–Hermite.
pub fn gh_expect_2d(n: usize, f: impl Fn(f64, f64) -> f64) -> f64 {
    let nodes = gauss_hermite_normal(n);
    let mut acc = 0.0;
    for &(a, wa) in &nodes {
        for &(b, wb) in &nodes {
            acc += wa * wb * f(a, b);
        }
    }
    acc
}

/// Mean and standard error of `xs`.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// ECE by enumerating bins and scanning all points for each one.
pub fn brute_ece(conf: &[f64], correct: &[bool], n_bins: usize) -> f64 {
    let n = conf.len() as f64;
    let mut total = 0.0;
    for b in 0..n_bins {
        let lo = b as f64 / n_bins as f64;
        let hi = (b + 1) as f64 / n_bins as f64;
        let last = b + 1 == n_bins;
        let members: Vec<usize> = (0..conf.len())
            .filter(|&i| conf[i] >= lo && (conf[i] < hi || (last && conf[i] <= 1.0)))
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|&&i| correct[i]).count() as f64 / m;
        let c = members.iter().map(|&i| conf[i]).sum::<f64>() / m;
        total += m / n * (acc - c).abs();
    }
    total
}

/// Area under the ROC curve by sweeping every distinct threshold and
/// integrating the curve with trapezoids; positives should score higher.
pub fn brute_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = pos.iter().chain(neg).copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let tpr = pos.iter().filter(|&&s| s >= t).count() as f64 / pos.len() as f64;
        let fpr = neg.iter().filter(|&&s| s >= t).count() as f64 / neg.len() as f64;
        pts.push((fpr, tpr));
    }
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

pub fn brute_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}
