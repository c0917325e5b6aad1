//! Datasets: synthetic generators, CSV loading, standardization, splitting and
//! the auxiliary-input sampler.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::variational::Labels;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("{0}")]
    Invalid(String),
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("row {row}, column {col}: cannot parse {value:?} as a number")]
    NonNumeric { row: usize, col: usize, value: String },
    #[error("row {row}, column {col}: class label {value:?} must be a non-negative integer")]
    BadLabel { row: usize, col: usize, value: String },
    #[error("row {row} has {got} fields, header has {expected}")]
    RaggedRow { row: usize, expected: usize, got: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_labels(&self) -> Labels<'_> {
        match self {
            Targets::Classes(c) => Labels::Classes(c),
            Targets::Values(v) => Labels::Values(v),
        }
    }

    fn gather(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    x: Tensor,
    targets: Targets,
    feature_mins: Vec<f64>,
    feature_maxs: Vec<f64>,
    task: Task,
}

impl Dataset {
    /// Checks shapes and labels and computes per-feature ranges from `x` (`[N, D]`).
    pub fn new(x: Tensor, targets: Targets, task: Task) -> Result<Self, DataError> {
        if x.rank() != 2 {
            return Err(DataError::Invalid(format!("features must be [N, D], got {:?}", x.shape())));
        }
        let (n, d) = (x.rows(), x.cols());
        if n == 0 {
            return Err(DataError::Empty);
        }
        if targets.len() != n {
            return Err(DataError::Invalid(format!("{n} rows but {} targets", targets.len())));
        }
        if !x.is_finite() {
            return Err(DataError::Invalid("features must be finite".into()));
        }
        match (&targets, task) {
            (Targets::Classes(c), Task::Classification { classes }) => {
                if let Some(&bad) = c.iter().find(|&&y| y >= classes) {
                    return Err(DataError::Invalid(format!("label {bad} out of range for {classes} classes")));
                }
            }
            (Targets::Values(v), Task::Regression) => {
                if v.iter().any(|t| !t.is_finite()) {
                    return Err(DataError::Invalid("targets must be finite".into()));
                }
            }
            _ => return Err(DataError::Invalid("targets do not match the task".into())),
        }
        let mut mins = vec![f64::INFINITY; d];
        let mut maxs = vec![f64::NEG_INFINITY; d];
        for i in 0..n {
            for (j, &v) in x.row(i).iter().enumerate() {
                mins[j] = mins[j].min(v);
                maxs[j] = maxs[j].max(v);
            }
        }
        Ok(Self { x, targets, feature_mins: mins, feature_maxs: maxs, task })
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn labels(&self) -> Labels<'_> {
        self.targets.as_labels()
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn feature_mins(&self) -> &[f64] {
        &self.feature_mins
    }

    pub fn feature_maxs(&self) -> &[f64] {
        &self.feature_maxs
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    /// Output dimension a model needs: `K` for classification, 2 (location and scale logit) for regression.
    pub fn output_dim(&self) -> usize {
        match self.task {
            Task::Classification { classes } => classes,
            Task::Regression => 2,
        }
    }

    /// Rows `idx` as features and targets.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Targets) {
        let d = self.d();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        (Tensor::matrix(idx.len(), d, data).expect("rows x d"), self.targets.gather(idx))
    }

    /// A new dataset of rows `idx`, with ranges recomputed.
    pub fn subset(&self, idx: &[usize]) -> Result<Self, DataError> {
        let (x, t) = self.gather(idx);
        Self::new(x, t, self.task)
    }

    /// Seeded shuffle into `(train, validation)` with `round(n · val_fraction)` validation rows.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Self, Self), DataError> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(DataError::Invalid(format!("validation fraction {val_fraction} not in [0, 1)")));
        }
        let n = self.n();
        let n_val = ((n as f64) * val_fraction).round() as usize;
        if n_val == 0 || n_val >= n {
            return Err(DataError::Invalid(format!("cannot split {n} rows with fraction {val_fraction}")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (val, train) = idx.split_at(n_val);
        Ok((self.subset(train)?, self.subset(val)?))
    }

    /// Labels of a classification dataset.
    pub fn classes(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes(c) => Some(c),
            Targets::Values(_) => None,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Training inputs of the sinusoid task, split between the two outer intervals.
pub const SINUSOID_INTERVALS: [(f64, f64); 2] = [(-0.75 * PI, -0.5 * PI), (0.5 * PI, 0.75 * PI)];

/// `y = 2 sin x + noise · ε`; half the points in each interval, the odd one in the first.
pub fn gen_sinusoid(n: usize, noise: f64, seed: u64) -> Result<Dataset, DataError> {
    if n < 2 {
        return Err(DataError::Invalid("sinusoid needs at least 2 points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_first = n - n / 2;
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let (lo, hi) = SINUSOID_INTERVALS[usize::from(i >= n_first)];
        let x = uniform(&mut rng, lo, hi);
        let eps: f64 = rng.sample(StandardNormal);
        xs.push(x);
        ys.push(2.0 * x.sin() + noise * eps);
    }
    Dataset::new(Tensor::matrix(n, 1, xs).expect("n x 1"), Targets::Values(ys), Task::Regression)
}

/// `points` evenly spaced inputs on `[−π, π]`.
pub fn sinusoid_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..points).map(|i| -PI + 2.0 * PI * i as f64 / (points - 1) as f64).collect(),
    }
}

/// Isotropic 2-D Gaussian blobs with centers evenly spaced on a circle; point `i` has label `i mod K`.
pub fn gen_blobs(n: usize, classes: usize, radius: f64, std: f64, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 || classes < 2 {
        return Err(DataError::Invalid("blobs need n >= 1 and at least 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(2 * n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let angle = 2.0 * PI * c as f64 / classes as f64;
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        xs.push(radius * angle.cos() + std * e1);
        xs.push(radius * angle.sin() + std * e2);
        ys.push(c);
    }
    Dataset::new(Tensor::matrix(n, 2, xs).expect("n x 2"), Targets::Classes(ys), Task::Classification { classes })
}

/// Two interleaved half circles with Gaussian jitter; even rows are the upper moon.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(2 * n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let t = uniform(&mut rng, 0.0, PI);
        let (a, b) = if c == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        xs.push(a + noise * e1);
        xs.push(b + noise * e2);
        ys.push(c);
    }
    Dataset::new(Tensor::matrix(n, 2, xs).expect("n x 2"), Targets::Classes(ys), Task::Classification { classes: 2 })
}

/// The widened box `[min − d/2, max + d/2]` per feature, `d = max − min`;
/// constant features get `[x − ½, x + ½]`.
pub fn aux_bounds(mins: &[f64], maxs: &[f64]) -> Vec<(f64, f64)> {
    mins.iter()
        .zip(maxs)
        .map(|(&lo, &hi)| {
            let d = hi - lo;
            if d > 0.0 {
                (lo - 0.5 * d, hi + 0.5 * d)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        })
        .collect()
}

/// `m` auxiliary inputs drawn uniformly from the widened feature box of `ds`.
pub fn sample_aux<R: Rng + ?Sized>(ds: &Dataset, m: usize, rng: &mut R) -> Tensor {
    let bounds = aux_bounds(&ds.feature_mins, &ds.feature_maxs);
    let mut data = Vec::with_capacity(m * bounds.len());
    for _ in 0..m {
        for &(lo, hi) in &bounds {
            data.push(uniform(rng, lo, hi));
        }
    }
    Tensor::matrix(m, bounds.len(), data).expect("m x d")
}

/// Per-feature affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Fits on the rows of `x`; constant features keep scale 1.
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, &v), &m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn transform(&self, x: &Tensor) -> Tensor {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn inverse(&self, x: &Tensor) -> Tensor {
        self.apply(x, |v, m, s| v * s + m)
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let d = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.mean[i % d], self.scale[i % d]))
            .collect();
        Tensor::matrix(x.rows(), d, data).expect("same shape")
    }
}

/// Standardized copy of `ds` with ranges recomputed, and the fitted transform.
pub fn standardize(ds: &Dataset) -> Result<(Dataset, Standardizer), DataError> {
    let st = Standardizer::fit(&ds.x);
    let out = Dataset::new(st.transform(&ds.x), ds.targets.clone(), ds.task)?;
    Ok((out, st))
}

/// Which column is the target and how to read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub target: String,
    pub task: CsvTask,
    /// Feature columns; all non-target columns when absent.
    #[serde(default)]
    pub features: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsvTask {
    Classification,
    Regression,
}

/// Parses a header-row CSV. Rows and columns in errors are 1-based data-row and
/// 0-based column indices.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let target = find(&schema.target)?;
    let features: Vec<usize> = match &schema.features {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_, _>>()?,
        None => (0..header.len()).filter(|&c| c != target).collect(),
    };
    if features.is_empty() {
        return Err(DataError::Invalid("no feature columns".into()));
    }
    let mut xs = Vec::new();
    let mut classes = Vec::new();
    let mut values = Vec::new();
    let mut n = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        if rec.len() != header.len() {
            return Err(DataError::RaggedRow { row, expected: header.len(), got: rec.len() });
        }
        for &c in &features {
            let s = rec[c].trim();
            let v: f64 = s
                .parse()
                .map_err(|_| DataError::NonNumeric { row, col: c, value: s.to_string() })?;
            if !v.is_finite() {
                return Err(DataError::NonNumeric { row, col: c, value: s.to_string() });
            }
            xs.push(v);
        }
        let s = rec[target].trim();
        match schema.task {
            CsvTask::Classification => classes.push(
                s.parse::<usize>()
                    .map_err(|_| DataError::BadLabel { row, col: target, value: s.to_string() })?,
            ),
            CsvTask::Regression => values.push(
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DataError::NonNumeric { row, col: target, value: s.to_string() })?,
            ),
        }
        n += 1;
    }
    if n == 0 {
        return Err(DataError::Empty);
    }
    let x = Tensor::matrix(n, features.len(), xs).expect("n x d");
    match schema.task {
        CsvTask::Classification => {
            let k = classes.iter().max().map_or(0, |m| m + 1).max(2);
            Dataset::new(x, Targets::Classes(classes), Task::Classification { classes: k })
        }
        CsvTask::Regression => Dataset::new(x, Targets::Values(values), Task::Regression),
    }
}

/// A dataset source as written in run configs; generator seeds come from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Sinusoid {
        #[serde(default = "default_sinusoid_n")]
        n: usize,
        #[serde(default = "default_sinusoid_noise")]
        noise: f64,
    },
    Blobs {
        n: usize,
        classes: usize,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_blob_std")]
        std: f64,
    },
    TwoMoons {
        n: usize,
        #[serde(default = "default_moons_noise")]
        noise: f64,
    },
    Csv {
        path: PathBuf,
        #[serde(flatten)]
        schema: CsvSchema,
        #[serde(default)]
        standardize: bool,
    },
}

fn default_sinusoid_n() -> usize {
    100
}
fn default_sinusoid_noise() -> f64 {
    0.1
}
fn default_radius() -> f64 {
    5.0
}
fn default_blob_std() -> f64 {
    1.0
}
fn default_moons_noise() -> f64 {
    0.1
}

impl DatasetSpec {
    /// Materializes the dataset; relative CSV paths resolve against `base_dir`.
    pub fn build(&self, seed: u64, base_dir: &Path) -> Result<Dataset, DataError> {
        match self {
            DatasetSpec::Sinusoid { n, noise } => gen_sinusoid(*n, *noise, seed),
            DatasetSpec::Blobs { n, classes, radius, std } => gen_blobs(*n, *classes, *radius, *std, seed),
            DatasetSpec::TwoMoons { n, noise } => gen_two_moons(*n, *noise, seed),
            DatasetSpec::Csv { path, schema, standardize: st } => {
                let p = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                let ds = load_csv(&p, schema)?;
                if *st {
                    Ok(standardize(&ds)?.0)
                } else {
                    Ok(ds)
                }
            }
        }
    }
}
