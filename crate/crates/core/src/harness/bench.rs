//! Per-epoch wall-clock timing of the three methods on one network and dataset.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::train::{build_data, csv_string};
use super::{write_file, HarnessError, Method, TrainConfig, Trainer};
use crate::regularizers::PriorSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    /// Training samples per example; 0 for the base model, which has none.
    pub m: usize,
    pub epochs: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub median_seconds: f64,
    pub params: usize,
}

fn summarize(method: Method, m: usize, times: &[f64], params: usize) -> BenchRow {
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = if times.len() > 1 { times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) { 0.5 * (sorted[mid - 1] + sorted[mid]) } else { sorted[mid] };
    BenchRow {
        method: method.as_str().into(),
        m,
        epochs: times.len(),
        mean_seconds: mean,
        std_seconds: var.sqrt(),
        median_seconds: median,
        params,
    }
}

/// Times `bench.epochs` epochs (after `bench.warmup` untimed ones) of vifo and vi
/// at each `M` in `bench.m_values`, interleaving methods epoch by epoch so slow
/// drifts hit all of them alike. Base epochs run alongside every block and are
/// pooled into one row. Runs on the calling thread only.
pub fn run_bench(cfg: &TrainConfig, base_dir: &Path) -> Result<Vec<BenchRow>, HarnessError> {
    let (train, _) = build_data(cfg, base_dir)?;
    let variant = |method: Method, m: usize| {
        let mut c = cfg.clone();
        c.method = method;
        c.m_train = m;
        if method == Method::Vi && !matches!(c.prior, PriorSpec::Naive { .. }) {
            c.prior = PriorSpec::naive();
        }
        c
    };

    let mut base_times = Vec::new();
    let mut base_params = 0;
    let mut rows = Vec::new();
    for &m in &cfg.bench.m_values {
        let mut trainers = [Method::Base, Method::Vifo, Method::Vi]
            .into_iter()
            .map(|method| Trainer::new(&variant(method, m), train.clone(), cfg.seed))
            .collect::<Result<Vec<_>, _>>()?;
        let mut times = vec![Vec::with_capacity(cfg.bench.epochs); trainers.len()];
        for epoch in 0..cfg.bench.warmup + cfg.bench.epochs {
            for (t, slot) in trainers.iter_mut().zip(times.iter_mut()) {
                let start = Instant::now();
                t.run_epoch()?;
                if epoch >= cfg.bench.warmup {
                    slot.push(start.elapsed().as_secs_f64());
                }
            }
        }
        base_times.extend_from_slice(&times[0]);
        base_params = trainers[0].model().param_count();
        rows.push(summarize(Method::Vifo, m, &times[1], trainers[1].model().param_count()));
        rows.push(summarize(Method::Vi, m, &times[2], trainers[2].model().param_count()));
    }
    rows.insert(0, summarize(Method::Base, 0, &base_times, base_params));
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    write_file(path, &csv_string(w)?)
}

/// Least-squares line through `(x, y)`: `(slope, intercept, r²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}
