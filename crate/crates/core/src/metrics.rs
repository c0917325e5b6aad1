//! Predictive-quality metrics: NLL, accuracy, calibration error, entropy and
//! out-of-distribution AUROC.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::variational::CategoricalPrediction;

pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no predictions")]
    Empty,
    #[error("{preds} predictions but {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("label {y} out of range for {k} classes")]
    BadLabel { y: usize, k: usize },
    #[error("need at least one bin")]
    NoBins,
}

/// How confidence bins are formed for calibration error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    /// `n` bins of width `1/n` on `[0, 1]`; edge values go to the higher bin.
    #[default]
    EqualWidth,
    /// Bins holding (nearly) the same number of points, by sorted confidence.
    EqualCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

fn check(preds: &[CategoricalPrediction], labels: &[usize]) -> Result<(), MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), labels: labels.len() });
    }
    for (p, &y) in preds.iter().zip(labels) {
        if y >= p.k() {
            return Err(MetricsError::BadLabel { y, k: p.k() });
        }
    }
    Ok(())
}

/// Per-bin accuracy and mean confidence. Empty bins are included with zero counts.
pub fn calibration_bins(
    preds: &[CategoricalPrediction],
    labels: &[usize],
    n_bins: usize,
    binning: Binning,
) -> Result<Vec<BinStat>, MetricsError> {
    check(preds, labels)?;
    if n_bins == 0 {
        return Err(MetricsError::NoBins);
    }
    let points: Vec<(f64, bool)> = preds
        .iter()
        .zip(labels)
        .map(|(p, &y)| (p.confidence(), p.argmax() == y))
        .collect();

    let groups: Vec<(f64, f64, Vec<(f64, bool)>)> = match binning {
        Binning::EqualWidth => {
            let mut groups: Vec<(f64, f64, Vec<(f64, bool)>)> = (0..n_bins)
                .map(|b| (b as f64 / n_bins as f64, (b + 1) as f64 / n_bins as f64, Vec::new()))
                .collect();
            for &(c, ok) in &points {
                let b = ((c * n_bins as f64).floor() as usize).min(n_bins - 1);
                groups[b].2.push((c, ok));
            }
            groups
        }
        Binning::EqualCount => {
            let mut sorted = points.clone();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let n = sorted.len();
            let (base, extra) = (n / n_bins, n % n_bins);
            let mut start = 0;
            (0..n_bins)
                .map(|b| {
                    let len = base + usize::from(b < extra);
                    let chunk = sorted[start..start + len].to_vec();
                    start += len;
                    let lo = chunk.first().map_or(f64::NAN, |p| p.0);
                    let hi = chunk.last().map_or(f64::NAN, |p| p.0);
                    (lo, hi, chunk)
                })
                .collect()
        }
    };

    Ok(groups
        .into_iter()
        .map(|(lower, upper, pts)| {
            let count = pts.len();
            let (accuracy, confidence) = if count == 0 {
                (0.0, 0.0)
            } else {
                (
                    pts.iter().filter(|p| p.1).count() as f64 / count as f64,
                    pts.iter().map(|p| p.0).sum::<f64>() / count as f64,
                )
            };
            BinStat { lower, upper, count, accuracy, confidence }
        })
        .collect())
}

/// Expected calibration error `Σ_b (|B_b|/n) |acc(B_b) − conf(B_b)|`.
pub fn ece(preds: &[CategoricalPrediction], labels: &[usize], n_bins: usize, binning: Binning) -> Result<f64, MetricsError> {
    let bins = calibration_bins(preds, labels, n_bins, binning)?;
    let n = preds.len() as f64;
    Ok(bins
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
        .sum())
}

/// Entropy in nats with `0 log 0 = 0`.
pub fn entropy(p: &CategoricalPrediction) -> f64 {
    -p.probs().iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>()
}

pub fn mean_entropy(preds: &[CategoricalPrediction]) -> Result<f64, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(preds.iter().map(entropy).sum::<f64>() / preds.len() as f64)
}

/// Mann–Whitney AUROC with average ranks for ties; `pos` scores should be higher.
pub fn auroc_scores(pos: &[f64], neg: &[f64]) -> Result<f64, MetricsError> {
    if pos.is_empty() || neg.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * all[i..=j].iter().filter(|p| p.1).count() as f64;
        i = j + 1;
    }
    let (n1, n0) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

/// AUROC separating in-distribution (positive) from OOD inputs by maximum probability.
pub fn auroc(id_preds: &[CategoricalPrediction], ood_preds: &[CategoricalPrediction]) -> Result<f64, MetricsError> {
    let id: Vec<f64> = id_preds.iter().map(CategoricalPrediction::confidence).collect();
    let ood: Vec<f64> = ood_preds.iter().map(CategoricalPrediction::confidence).collect();
    auroc_scores(&id, &ood)
}

/// Mean `−log p(y)` with probabilities floored at [`PROB_FLOOR`], and argmax accuracy.
pub fn nll_and_accuracy(preds: &[CategoricalPrediction], labels: &[usize]) -> Result<(f64, f64), MetricsError> {
    check(preds, labels)?;
    let n = preds.len() as f64;
    let nll = preds
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p.probs()[y].max(PROB_FLOOR).ln())
        .sum::<f64>()
        / n;
    let acc = preds.iter().zip(labels).filter(|(p, &y)| p.argmax() == y).count() as f64 / n;
    Ok((nll, acc))
}

/// Mean Gaussian NLL and RMSE of `(mean, variance)` predictions.
pub fn regression_scores(preds: &[(f64, f64)], targets: &[f64]) -> Result<(f64, f64), MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    if preds.len() != targets.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), labels: targets.len() });
    }
    let n = preds.len() as f64;
    let nll = preds
        .iter()
        .zip(targets)
        .map(|(&(m, v), &y)| 0.5 * (2.0 * std::f64::consts::PI * v).ln() + (y - m).powi(2) / (2.0 * v))
        .sum::<f64>()
        / n;
    let rmse = (preds.iter().zip(targets).map(|(&(m, _), &y)| (y - m).powi(2)).sum::<f64>() / n).sqrt();
    Ok((nll, rmse))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nll: f64,
    pub accuracy: f64,
    pub ece: f64,
    pub mean_entropy: f64,
    pub auroc: Option<f64>,
    pub ood_mean_entropy: Option<f64>,
    pub n_examples: usize,
    pub wall_clock_seconds: f64,
}

impl EvalReport {
    pub fn from_predictions(
        preds: &[CategoricalPrediction],
        labels: &[usize],
        ood: Option<&[CategoricalPrediction]>,
        n_bins: usize,
        binning: Binning,
        wall_clock_seconds: f64,
    ) -> Result<Self, MetricsError> {
        let (nll, accuracy) = nll_and_accuracy(preds, labels)?;
        let (auroc, ood_mean_entropy) = match ood {
            Some(o) => (Some(auroc(preds, o)?), Some(mean_entropy(o)?)),
            None => (None, None),
        };
        Ok(Self {
            nll,
            accuracy,
            ece: ece(preds, labels, n_bins, binning)?,
            mean_entropy: mean_entropy(preds)?,
            auroc,
            ood_mean_entropy,
            n_examples: preds.len(),
            wall_clock_seconds,
        })
    }
}
