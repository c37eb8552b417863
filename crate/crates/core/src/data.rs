//! Datasets: deterministic synthetic generators, CSV ingestion and seeded
//! mini-batching.
//!
//! Every dataset carries a fixed train/test split. Generators and the CSV
//! loader both put every fourth sample (`index % 4 == 3`) in the test split;
//! generators emit samples class by class, so the split is stratified.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        train: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::invalid(format!("{} labels for {n} samples", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside {num_classes} classes")));
        }
        let mut seen = vec![false; n];
        for &i in train.iter().chain(&test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!(
                    "split index {i} is out of range or listed twice"
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("train/test split does not cover every sample"));
        }
        Ok(Self {
            features: features.detach(),
            labels,
            num_classes,
            train,
            test,
        })
    }

    /// Splits with the `index % 4 == 3 → test` rule.
    pub fn with_default_split(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = features.rows();
        let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|i| i % 4 == 3);
        Self::new(features, labels, num_classes, train, test)
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Test => self.test.clone(),
            Split::All => (0..self.len()).collect(),
        }
    }

    /// Features and labels of the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(data, [indices.len(), d]).expect("sized buffer"), labels)
    }

    pub fn split(&self, split: Split) -> (Tensor, Vec<usize>) {
        self.select(&self.indices(split))
    }

    /// Writes `x0..x{d-1}` feature columns followed by the label column.
    pub fn write_csv(&self, path: &Path, label_column: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push(label_column.to_string());
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(f64::to_string).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        write_atomic(path, &bytes)
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            column: None,
            msg: format!("{other:?}"),
        },
    }
}

fn check_counts(what: &str, num_classes: usize, per_class: usize) -> Result<()> {
    if num_classes == 0 || per_class == 0 {
        return Err(Error::invalid(format!(
            "{what}: num_classes and per_class must be positive, got {num_classes} and {per_class}"
        )));
    }
    Ok(())
}

/// Gaussian clusters around class means placed on a closed curve of radius 1:
/// coordinate `j` of mean `k` is `cos(2πk/C + πj/dim)` (a circle in 2-D).
/// A `label_noise_fraction` of samples, chosen uniformly without
/// replacement, get a different class drawn uniformly from the others.
pub fn generate_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    cluster_std: f64,
    label_noise_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    check_counts("blobs", num_classes, per_class)?;
    if dim == 0 {
        return Err(Error::invalid("blobs: dim must be positive"));
    }
    if !(cluster_std >= 0.0 && cluster_std.is_finite()) {
        return Err(Error::invalid(format!("blobs: cluster_std must be >= 0, got {cluster_std}")));
    }
    if !(0.0..1.0).contains(&label_noise_fraction) {
        return Err(Error::invalid(format!(
            "blobs: label_noise_fraction must lie in [0, 1), got {label_noise_fraction}"
        )));
    }
    let mut rng = rng::stream(seed, rng::DATA);
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..num_classes {
        let angle = 2.0 * PI * k as f64 / num_classes as f64;
        let mean: Vec<f64> = (0..dim).map(|j| (angle + PI * j as f64 / dim as f64).cos()).collect();
        for _ in 0..per_class {
            data.extend(mean.iter().map(|m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + cluster_std * z
            }));
            labels.push(k);
        }
    }
    let flips = (label_noise_fraction * n as f64).round() as usize;
    if num_classes > 1 && flips > 0 {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &i in &order[..flips] {
            let shift = rng.random_range(1..num_classes);
            labels[i] = (labels[i] + shift) % num_classes;
        }
    }
    Dataset::with_default_split(Tensor::new(data, [n, dim])?, labels, num_classes)
}

/// Interleaved 2-D spiral arms. Arm `k` starts at angle `2πk/C`; sample `t`
/// sits at radius `r = (t+1)/per_class` and angle `2πk/C + 2πr`, plus
/// isotropic Gaussian noise of standard deviation `noise`.
pub fn generate_spirals(num_classes: usize, per_class: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_counts("spirals", num_classes, per_class)?;
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid(format!("spirals: noise must be >= 0, got {noise}")));
    }
    let mut rng = rng::stream(seed, rng::DATA);
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for k in 0..num_classes {
        let offset = 2.0 * PI * k as f64 / num_classes as f64;
        for t in 0..per_class {
            let r = (t + 1) as f64 / per_class as f64;
            let theta = offset + 2.0 * PI * r;
            let (nx, ny): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            data.push(r * theta.cos() + noise * nx);
            data.push(r * theta.sin() + noise * ny);
            labels.push(k);
        }
    }
    Dataset::with_default_split(Tensor::new(data, [n, 2])?, labels, num_classes)
}

/// Reads a headered CSV. Every column except `label_column` is a feature, in
/// file order. Labels must be non-negative integers; the class count is
/// `max(label) + 1`.
pub fn load_csv_dataset(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let headers = reader.headers().map_err(|e| csv_io(path, e))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            column: Some(label_column.to_string()),
            msg: format!("label column `{label_column}` not found in header"),
        })?;
    let dim = headers.len() - 1;
    let parse_err = |line: u64, col: &str, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        column: Some(col.to_string()),
        msg,
    };

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_io(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        for (j, cell) in record.iter().enumerate() {
            let col = &headers[j];
            if j == label_idx {
                labels.push(parse_label(cell).ok_or_else(|| {
                    parse_err(line, col, format!("`{cell}` is not a non-negative integer label"))
                })?);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| parse_err(line, col, format!("`{cell}` is not a number")))?;
                if !v.is_finite() {
                    return Err(parse_err(line, col, format!("`{cell}` is not finite")));
                }
                data.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(parse_err(1, label_column, "file has no data rows".into()));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let n = labels.len();
    Dataset::with_default_split(Tensor::new(data, [n, dim])?, labels, num_classes)
}

fn parse_label(cell: &str) -> Option<usize> {
    if let Ok(v) = cell.parse::<usize>() {
        return Some(v);
    }
    let v: f64 = cell.parse().ok()?;
    (v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64).then_some(v as usize)
}

/// Dataset description as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Blobs {
        num_classes: usize,
        per_class: usize,
        dim: usize,
        cluster_std: f64,
        label_noise: f64,
        seed: u64,
    },
    Spirals {
        num_classes: usize,
        per_class: usize,
        noise: f64,
        seed: u64,
    },
    Csv {
        path: PathBuf,
        label_column: String,
    },
}

impl DataSpec {
    pub fn build(&self) -> Result<Dataset> {
        match self {
            DataSpec::Blobs {
                num_classes,
                per_class,
                dim,
                cluster_std,
                label_noise,
                seed,
            } => generate_blobs(*num_classes, *per_class, *dim, *cluster_std, *label_noise, *seed),
            DataSpec::Spirals {
                num_classes,
                per_class,
                noise,
                seed,
            } => generate_spirals(*num_classes, *per_class, *noise, *seed),
            DataSpec::Csv { path, label_column } => load_csv_dataset(path, label_column),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// Dataset row of each sample.
    pub indices: Vec<usize>,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

/// Iterator over shuffled mini-batches of one split.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let (features, labels) = self.dataset.select(&indices);
        Some(Batch {
            indices,
            features,
            labels,
        })
    }
}

/// Permutes the split with a generator keyed by `(shuffle_seed, epoch)` and
/// yields consecutive batches; the last one may be short.
pub fn batch_iterator(
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let mut order = dataset.indices(split);
    if order.is_empty() {
        return Err(Error::invalid(format!("{split:?} split is empty")));
    }
    order.shuffle(&mut rng::stream(shuffle_seed, rng::SHUFFLE_BASE + epoch as u64));
    Ok(Batches {
        dataset,
        order,
        batch_size,
        pos: 0,
    })
}
