//! Per-member and ensemble evaluation, in-distribution and out-of-distribution.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::train::{build_data, csv_string, stream_rng};
use super::{write_file, HarnessError, Model, RunManifest, TrainConfig};
use crate::autodiff::Tensor;
use crate::data::{Dataset, Targets};
use crate::metrics::{regression_scores, EvalReport};
use crate::variational::{ensemble_predict, CategoricalPrediction};

const EVAL_STREAM: u64 = 4;
/// Offset between the run seed and the seed of a generated OOD dataset.
const OOD_SEED_OFFSET: u64 = 0x9E37_79B9;

/// One line of `metrics.csv`. Classification-only columns are empty for regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub prior: String,
    pub eta: f64,
    pub eta_aux: f64,
    /// Member seed, or `ensemble`.
    pub seed: String,
    pub nll: f64,
    pub acc: Option<f64>,
    pub ece: Option<f64>,
    pub entropy: Option<f64>,
    pub auroc: Option<f64>,
    pub seconds: f64,
}

impl MetricsRow {
    pub fn is_ensemble(&self) -> bool {
        self.seed == "ensemble"
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    write_file(path, &csv_string(w)?)
}

/// Out-of-distribution inputs configured for the run, if any.
pub fn config_ood(cfg: &TrainConfig, base_dir: &Path) -> Result<Option<Tensor>, HarnessError> {
    cfg.ood
        .as_ref()
        .map(|spec| Ok(spec.build(cfg.seed.wrapping_add(OOD_SEED_OFFSET), base_dir)?.x().clone()))
        .transpose()
}

/// Metrics rows (members in order, then the ensemble) and, for classification,
/// the matching reports. Member `i` draws evaluation noise from its own seed
/// unless common random numbers are requested.
pub fn evaluate_members(
    cfg: &TrainConfig,
    members: &[(u64, &Model)],
    data: &Dataset,
    ood: Option<&Tensor>,
) -> Result<(Vec<MetricsRow>, Vec<EvalReport>), HarnessError> {
    if members.is_empty() {
        return Err(HarnessError::Invalid("no models to evaluate".into()));
    }
    if let Some(o) = ood {
        if o.cols() != data.d() {
            return Err(HarnessError::Invalid(format!(
                "OOD data has {} features, expected {}",
                o.cols(),
                data.d()
            )));
        }
    }
    let row = |seed: String, nll, acc, ece, entropy, auroc, seconds| MetricsRow {
        method: cfg.method.as_str().into(),
        prior: cfg.prior.label().into(),
        eta: cfg.eta,
        eta_aux: cfg.eta_aux,
        seed,
        nll,
        acc,
        ece,
        entropy,
        auroc,
        seconds,
    };
    let rng_seed = |s: u64| if cfg.common_random_numbers { cfg.seed } else { s };
    let mut rows = Vec::with_capacity(members.len() + 1);
    let all_start = Instant::now();

    match data.targets() {
        Targets::Classes(labels) => {
            let mut reports = Vec::with_capacity(members.len() + 1);
            let mut id_preds = Vec::with_capacity(members.len());
            let mut ood_preds = Vec::with_capacity(members.len());
            for &(seed, model) in members {
                let start = Instant::now();
                let mut rng = stream_rng(rng_seed(seed), EVAL_STREAM);
                let p = model.predict_dataset_classification(data, cfg.m_eval, &mut rng)?;
                let o = ood.map(|x| model.predict_classification(x, cfg.m_eval, &mut rng)).transpose()?;
                let rep =
                    EvalReport::from_predictions(&p, labels, o.as_deref(), cfg.n_bins, cfg.binning, start.elapsed().as_secs_f64())?;
                rows.push(report_row(&row, seed.to_string(), &rep));
                reports.push(rep);
                id_preds.push(p);
                ood_preds.push(o);
            }
            let ens = average(&id_preds)?;
            let ens_ood = match ood {
                Some(_) => Some(average(&ood_preds.into_iter().flatten().collect::<Vec<_>>())?),
                None => None,
            };
            let rep = EvalReport::from_predictions(
                &ens,
                labels,
                ens_ood.as_deref(),
                cfg.n_bins,
                cfg.binning,
                all_start.elapsed().as_secs_f64(),
            )?;
            rows.push(report_row(&row, "ensemble".into(), &rep));
            reports.push(rep);
            Ok((rows, reports))
        }
        Targets::Values(targets) => {
            let mut all = Vec::with_capacity(members.len());
            for &(seed, model) in members {
                let start = Instant::now();
                let mut rng = stream_rng(rng_seed(seed), EVAL_STREAM);
                if model.output_dim() != data.output_dim() {
                    return Err(HarnessError::OutputMismatch { model: model.output_dim(), data: data.output_dim() });
                }
                let p = model.predict_regression(data.x(), cfg.m_eval, &mut rng)?;
                let (nll, _) = regression_scores(&p, targets)?;
                rows.push(row(seed.to_string(), nll, None, None, None, None, start.elapsed().as_secs_f64()));
                all.push(p);
            }
            // Moments of the equally weighted mixture of member predictives.
            let k = all.len() as f64;
            let mix: Vec<(f64, f64)> = (0..data.n())
                .map(|i| {
                    let mean = all.iter().map(|p| p[i].0).sum::<f64>() / k;
                    let second = all.iter().map(|p| p[i].1 + p[i].0 * p[i].0).sum::<f64>() / k;
                    (mean, second - mean * mean)
                })
                .collect();
            let (nll, _) = regression_scores(&mix, targets)?;
            rows.push(row("ensemble".into(), nll, None, None, None, None, all_start.elapsed().as_secs_f64()));
            Ok((rows, Vec::new()))
        }
    }
}

fn report_row<F>(row: &F, seed: String, r: &EvalReport) -> MetricsRow
where
    F: Fn(String, f64, Option<f64>, Option<f64>, Option<f64>, Option<f64>, f64) -> MetricsRow,
{
    row(seed, r.nll, Some(r.accuracy), Some(r.ece), Some(r.mean_entropy), r.auroc, r.wall_clock_seconds)
}

fn average(per_member: &[Vec<CategoricalPrediction>]) -> Result<Vec<CategoricalPrediction>, HarnessError> {
    let n = per_member[0].len();
    (0..n)
        .map(|i| {
            let column: Vec<CategoricalPrediction> = per_member.iter().map(|p| p[i].clone()).collect();
            ensemble_predict(&column).map_err(|e| HarnessError::Invalid(e.to_string()))
        })
        .collect()
}

/// Reads a headered CSV whose columns are all numeric features.
pub fn load_feature_csv(path: &Path) -> Result<Tensor, HarnessError> {
    let file = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| HarnessError::Invalid(format!("{}: row {}: `{v}` is not a number", path.display(), i + 1)))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(HarnessError::Invalid(format!("{}: no rows", path.display())));
    }
    Tensor::from_rows(&rows).map_err(|e| HarnessError::Invalid(format!("{}: {e}", path.display())))
}

/// Loads the members saved under `run_dir/models` and evaluates them on the
/// evaluation split of `cfg` (default: the run's own manifest config).
pub fn evaluate_run(
    run_dir: &Path,
    cfg: Option<TrainConfig>,
    base_dir: &Path,
    ood_path: Option<&Path>,
) -> Result<(Vec<MetricsRow>, Vec<EvalReport>), HarnessError> {
    let manifest_path = run_dir.join("manifest.json");
    let manifest: RunManifest = {
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| HarnessError::io(&manifest_path, e))?;
        serde_json::from_str(&text)?
    };
    let cfg = cfg.unwrap_or_else(|| manifest.config.clone());
    let models = manifest
        .seeds
        .members
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let path = run_dir.join("models").join(format!("member_{i}.json"));
            let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
            Ok((seed, Model::from_json(&text)?))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let (_, eval) = build_data(&cfg, base_dir)?;
    let ood = match ood_path {
        Some(p) => Some(load_feature_csv(p)?),
        None => config_ood(&cfg, base_dir)?,
    };
    let refs: Vec<(u64, &Model)> = models.iter().map(|(s, m)| (*s, m)).collect();
    evaluate_members(&cfg, &refs, &eval, ood.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;
    use crate::harness::{train_member, Method};

    fn cfg(method: Method) -> TrainConfig {
        let mut cfg = TrainConfig::new(method, DatasetSpec::Blobs { n: 80, classes: 3, radius: 4.0, std: 1.0 });
        cfg.network.hidden = vec![8];
        cfg.epochs = 5;
        cfg.batch_size = 16;
        cfg.m_eval = 20;
        cfg
    }

    #[test]
    fn identical_copies_match_members_and_jensen_holds() {
        let c = cfg(Method::Vifo);
        let (train, val) = build_data(&c, Path::new(".")).unwrap();
        let m = train_member(&c, &train, 0).unwrap().model;
        let mut crn = c.clone();
        crn.common_random_numbers = true;
        let (rows, _) = evaluate_members(&crn, &[(0, &m), (1, &m), (2, &m)], &val, None).unwrap();
        let ens = rows.last().unwrap();
        assert!(ens.is_ensemble());
        assert!((ens.nll - rows[0].nll).abs() < 1e-12);
        assert_eq!(ens.acc, rows[0].acc);

        let m2 = train_member(&c, &train, 1).unwrap().model;
        let (rows, reports) = evaluate_members(&c, &[(0, &m), (1, &m2)], &val, None).unwrap();
        assert_eq!(reports.len(), 3);
        let mean_member = (rows[0].nll + rows[1].nll) / 2.0;
        assert!(rows[2].nll <= mean_member + 1e-12);
    }

    #[test]
    fn ood_columns_and_dimension_check() {
        let c = cfg(Method::Base);
        let (train, val) = build_data(&c, Path::new(".")).unwrap();
        let m = train_member(&c, &train, 0).unwrap().model;
        let ood = Tensor::filled(&[10, 2], 30.0);
        let (rows, _) = evaluate_members(&c, &[(0, &m)], &val, Some(&ood)).unwrap();
        assert!(rows.iter().all(|r| r.auroc.is_some()));
        let bad = Tensor::filled(&[10, 3], 0.0);
        assert!(evaluate_members(&c, &[(0, &m)], &val, Some(&bad)).is_err());
    }

    #[test]
    fn class_count_mismatch_is_an_error() {
        let c = cfg(Method::Vifo);
        let (train, _) = build_data(&c, Path::new(".")).unwrap();
        let m = train_member(&c, &train, 0).unwrap().model;
        let other = DatasetSpec::Blobs { n: 40, classes: 4, radius: 4.0, std: 1.0 }.build(0, Path::new(".")).unwrap();
        assert!(matches!(
            evaluate_members(&c, &[(0, &m)], &other, None),
            Err(HarnessError::OutputMismatch { model: 3, data: 4 })
        ));
    }

    #[test]
    fn regression_rows_leave_class_columns_empty() {
        let mut c = TrainConfig::new(Method::Vifo, DatasetSpec::Sinusoid { n: 40, noise: 0.1 });
        c.network.hidden = vec![8];
        c.epochs = 2;
        c.m_eval = 10;
        let (train, val) = build_data(&c, Path::new(".")).unwrap();
        let m = train_member(&c, &train, 0).unwrap().model;
        let (rows, reports) = evaluate_members(&c, &[(0, &m)], &val, None).unwrap();
        assert!(reports.is_empty());
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.acc.is_none() && r.nll.is_finite()));
    }
}
