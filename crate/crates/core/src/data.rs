//! Labelled datasets, synthetic generators and file loaders.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `n x features`
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

/// A mini-batch copied out of a [`Dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, _) = x.dims2()?;
        if n != y.len() {
            return Err(Error::shape("Dataset", format!("{n} rows but {} labels", y.len())));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset { x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let d = self.features();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        Batch {
            x: Tensor::new(vec![idx.len(), d], data).expect("batch shape"),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let b = self.batch(idx);
        Dataset { x: b.x, y: b.y, classes: self.classes }
    }

    /// Shuffled mini-batches covering every sample once.
    pub fn epoch_batches(&self, batch_size: usize, rng: &mut Rng) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }

    pub fn as_batch(&self) -> Batch {
        Batch { x: self.x.clone(), y: self.y.clone() }
    }
}

/// Per-feature mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Result<Self> {
        let (n, d) = x.dims2()?;
        if n == 0 {
            return Err(Error::InvalidArgument("cannot standardize an empty set".into()));
        }
        let mut mean = vec![0.0; d];
        for row in x.rows() {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in x.rows() {
            var.iter_mut().zip(row).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m));
        }
        let std = var.into_iter().map(|s| (s / n as f64).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let d = self.mean.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape")
    }
}

/// What to generate or load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    TwoMoons {
        n: usize,
        noise: f64,
        #[serde(default)]
        label_noise: f64,
    },
    Spirals {
        n: usize,
        classes: usize,
        noise: f64,
        #[serde(default)]
        label_noise: f64,
    },
    CsvVectors {
        path: PathBuf,
    },
    IdxImages {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        subset_size: Option<usize>,
    },
}

impl DatasetSpec {
    pub fn num_classes_hint(&self) -> Option<usize> {
        match self {
            DatasetSpec::TwoMoons { .. } => Some(2),
            DatasetSpec::Spirals { classes, .. } => Some(*classes),
            _ => None,
        }
    }
}

fn flip_labels(y: &mut [usize], classes: usize, fraction: f64, rng: &mut Rng) {
    if fraction <= 0.0 || classes < 2 {
        return;
    }
    for label in y.iter_mut() {
        if rng.random::<f64>() < fraction {
            let shift = rng.random_range(1..classes);
            *label = (*label + shift) % classes;
        }
    }
}

/// Two interleaving half circles with Gaussian jitter.
pub fn two_moons(n: usize, noise: f64, label_noise: f64, rng: &mut Rng) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument("two_moons needs n >= 2".into()));
    }
    let n_out = n / 2;
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let (class, k, count) = if i < n_out { (0, i, n_out) } else { (1, i - n_out, n - n_out) };
        let t = std::f64::consts::PI * k as f64 / (count.max(2) - 1) as f64;
        let (px, py) = if class == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        let jx: f64 = StandardNormal.sample(rng);
        let jy: f64 = StandardNormal.sample(rng);
        rows.push(vec![px + noise * jx, py + noise * jy]);
        y.push(class);
    }
    flip_labels(&mut y, 2, label_noise, rng);
    Dataset::new(Tensor::from_rows(&rows)?, y, 2)
}

/// `classes` interleaved Archimedean spiral arms.
pub fn spirals(n: usize, classes: usize, noise: f64, label_noise: f64, rng: &mut Rng) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(Error::InvalidArgument("spirals needs classes >= 2 and n >= classes".into()));
    }
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let k = i / classes;
        let per = n.div_ceil(classes);
        let r = (k as f64 + 0.5) / per as f64;
        let theta = class as f64 * 2.0 * std::f64::consts::PI / classes as f64 + 4.0 * r;
        let jitter: f64 = StandardNormal.sample(rng);
        let theta = theta + noise * jitter;
        rows.push(vec![r * theta.sin(), r * theta.cos()]);
        y.push(class);
    }
    flip_labels(&mut y, classes, label_noise, rng);
    Dataset::new(Tensor::from_rows(&rows)?, y, classes)
}

/// Numeric CSV without header; the last column is the integer class label.
pub fn load_csv_vectors(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut y = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: line_no, msg };
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() < 2 {
            return Err(parse_err("need at least one feature and a label".into()));
        }
        let (label, feats) = cells.split_last().unwrap();
        let feats = feats
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| parse_err(format!("non-numeric cell `{c}`"))))
            .collect::<Result<Vec<_>>>()?;
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("non-finite feature".into()));
        }
        let label = label.parse::<usize>().map_err(|_| parse_err(format!("bad label `{label}`")))?;
        if let Some(first) = rows.first() {
            if first.len() != feats.len() {
                return Err(parse_err(format!("expected {} features, found {}", first.len(), feats.len())));
            }
        }
        rows.push(feats);
        y.push(label);
    }
    if rows.is_empty() {
        return Err(Error::Parse { path: path.to_path_buf(), line: 0, msg: "no data rows".into() });
    }
    let classes = y.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(Tensor::from_rows(&rows)?, y, classes)
}

fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let err = |msg: &str| Error::Parse { path: path.to_path_buf(), line: 0, msg: msg.into() };
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(err("bad IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(err("only unsigned-byte IDX payloads are supported"));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(err("truncated IDX header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let total: usize = dims.iter().product();
    if bytes.len() != header + total {
        return Err(err("IDX payload size disagrees with header"));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// IDX (MNIST-style) images and labels; pixels scaled to `[0, 1]` and flattened.
pub fn load_idx_images(images: &Path, labels: &Path, subset: Option<usize>) -> Result<Dataset> {
    let (idims, pixels) = read_idx(images)?;
    let (ldims, lab) = read_idx(labels)?;
    if idims.is_empty() || ldims.len() != 1 || idims[0] != ldims[0] {
        return Err(Error::Parse { path: labels.to_path_buf(), line: 0, msg: "image/label counts differ".into() });
    }
    let n = subset.map_or(idims[0], |s| s.min(idims[0]));
    let d: usize = idims[1..].iter().product();
    let x = Tensor::new(vec![n, d], pixels[..n * d].iter().map(|&p| p as f64 / 255.0).collect())?;
    let y: Vec<usize> = lab[..n].iter().map(|&l| l as usize).collect();
    let classes = y.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(x, y, classes)
}

pub fn load(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    let mut r = rng::stream(seed, 0xDA7A);
    match spec {
        DatasetSpec::TwoMoons { n, noise, label_noise } => two_moons(*n, *noise, *label_noise, &mut r),
        DatasetSpec::Spirals { n, classes, noise, label_noise } => spirals(*n, *classes, *noise, *label_noise, &mut r),
        DatasetSpec::CsvVectors { path } => load_csv_vectors(path),
        DatasetSpec::IdxImages { images, labels, subset_size } => load_idx_images(images, labels, *subset_size),
    }
}

/// Deterministic shuffled split, standardized with training statistics only.
pub fn make_dataset(spec: &DatasetSpec, seed: u64, validation_fraction: f64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::config("dataset.validation_fraction", "must lie in [0, 1)"));
    }
    let full = load(spec, seed)?;
    let mut order: Vec<usize> = (0..full.len()).collect();
    order.shuffle(&mut rng::stream(seed, 0x5B11));
    let n_val = ((full.len() as f64) * validation_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let mut train = full.subset(train_idx);
    let mut val = full.subset(val_idx);
    let st = Standardizer::fit(&train.x)?;
    train.x = st.apply(&train.x);
    val.x = st.apply(&val.x);
    Ok((train, val))
}
