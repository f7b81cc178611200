//! Dataset loading: seeded synthetic sets, IDX image/label pairs and CSV.
//! Features are min-max scaled to `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Batch;
use crate::scalar::Scalar;
use crate::seeding::{self, Stream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Isotropic Gaussian clusters around uniformly placed centres.
    SyntheticBlobs {
        classes: usize,
        samples: usize,
        features: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default = "default_center_box")]
        center_box: f64,
    },
    /// Two interleaved half circles.
    SyntheticMoons {
        samples: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        #[serde(default)]
        classes: Option<usize>,
    },
    /// Numeric columns followed by an integer label column.
    Csv {
        path: PathBuf,
        #[serde(default)]
        has_header: bool,
        #[serde(default)]
        classes: Option<usize>,
    },
}

fn default_spread() -> f64 {
    1.0
}

fn default_center_box() -> f64 {
    5.0
}

fn default_noise() -> f64 {
    0.1
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub kind: DatasetKind,
    /// Falls back to the experiment seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Held-out fraction when the source has no separate test split.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Reshape every sample, e.g. `[1, 8, 8]` to feed 64 features to a conv net.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_test: Option<usize>,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind) -> Self {
        Self { kind, seed: None, test_fraction: default_test_fraction(), sample_shape: None, max_train: None, max_test: None }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit<T> {
    pub train: Batch<T>,
    pub test: Batch<T>,
}

/// Loads and splits a dataset. `seed` drives generation and the split.
pub fn load_dataset<T: Scalar>(spec: &DatasetSpec, seed: u64) -> Result<DatasetSplit<T>> {
    let seed = spec.seed.unwrap_or(seed);
    let mut split = match &spec.kind {
        DatasetKind::SyntheticBlobs { classes, samples, features, spread, center_box } => {
            let all = synthetic_blobs(*classes, *samples, *features, *spread, *center_box, seed)?;
            split_holdout(&all, spec.test_fraction, seed)?
        }
        DatasetKind::SyntheticMoons { samples, noise } => {
            let all = synthetic_moons(*samples, *noise, seed)?;
            split_holdout(&all, spec.test_fraction, seed)?
        }
        DatasetKind::Idx { train_images, train_labels, test_images, test_labels, classes } => {
            let train = read_idx_pair(train_images, train_labels, *classes)?;
            match (test_images, test_labels) {
                (Some(ti), Some(tl)) => {
                    let test = read_idx_pair(ti, tl, Some(classes.unwrap_or(train.num_classes())))?;
                    if test.sample_shape() != train.sample_shape() {
                        return Err(Error::Format("train and test images differ in size".into()));
                    }
                    let classes = train.num_classes().max(test.num_classes());
                    DatasetSplit { train: with_classes(train, classes)?, test: with_classes(test, classes)? }
                }
                (None, None) => split_holdout(&train, spec.test_fraction, seed)?,
                _ => return Err(Error::Config("idx test_images and test_labels must be given together".into())),
            }
        }
        DatasetKind::Csv { path, has_header, classes } => {
            let all = read_csv_dataset(path, *has_header, *classes)?;
            split_holdout(&all, spec.test_fraction, seed)?
        }
    };
    if let Some(n) = spec.max_train {
        split.train = take_first(split.train, n)?;
    }
    if let Some(n) = spec.max_test {
        split.test = take_first(split.test, n)?;
    }
    if let Some(shape) = &spec.sample_shape {
        split.train = split.train.reshaped(shape)?;
        split.test = split.test.reshaped(shape)?;
    }
    Ok(split)
}

fn take_first<T: Scalar>(batch: Batch<T>, n: usize) -> Result<Batch<T>> {
    if n == 0 {
        return Err(Error::Config("sample limits must be positive".into()));
    }
    if n >= batch.len() {
        return Ok(batch);
    }
    batch.select(&(0..n).collect::<Vec<_>>())
}

fn with_classes<T: Scalar>(b: Batch<T>, classes: usize) -> Result<Batch<T>> {
    let (inputs, labels) = (b.inputs().clone(), b.labels().to_vec());
    Batch::new(inputs, labels, classes)
}

/// Seeded shuffle, then the last `test_fraction` of samples form the test set.
pub fn split_holdout<T: Scalar>(all: &Batch<T>, test_fraction: f64, seed: u64) -> Result<DatasetSplit<T>> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test_fraction must lie in (0, 1), got {test_fraction}")));
    }
    let n = all.len();
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::Config(format!("cannot split {n} samples with test_fraction {test_fraction}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeding::rng(seed, Stream::Split));
    let (train, test) = idx.split_at(n - n_test);
    Ok(DatasetSplit { train: all.select(train)?, test: all.select(test)? })
}

/// Per-feature min-max scaling to `[0, 1]`; constant features map to 0.
pub fn min_max_normalize(rows: &mut [f64], width: usize) {
    for j in 0..width {
        let col = rows.iter().skip(j).step_by(width);
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let range = hi - lo;
        for x in rows.iter_mut().skip(j).step_by(width) {
            *x = if range > 0.0 { (*x - lo) / range } else { 0.0 };
        }
    }
}

fn build_batch<T: Scalar>(mut rows: Vec<f64>, width: usize, labels: Vec<usize>, classes: usize) -> Result<Batch<T>> {
    min_max_normalize(&mut rows, width);
    let inputs = Tensor::from_f64(vec![labels.len(), width], &rows)?;
    Batch::new(inputs, labels, classes)
}

/// Balanced Gaussian clusters; sample `i` belongs to class `i % classes`.
pub fn synthetic_blobs<T: Scalar>(
    classes: usize,
    samples: usize,
    features: usize,
    spread: f64,
    center_box: f64,
    seed: u64,
) -> Result<Batch<T>> {
    if classes < 2 || samples < classes || features == 0 {
        return Err(Error::Config(format!(
            "synthetic-blobs needs classes >= 2, samples >= classes, features >= 1 (got {classes}, {samples}, {features})"
        )));
    }
    let noise = Normal::new(0.0, spread).map_err(|e| Error::Config(format!("bad spread {spread}: {e}")))?;
    let mut rng = seeding::rng(seed, Stream::Dataset);
    let centers: Vec<f64> = (0..classes * features).map(|_| rng.random_range(-center_box..=center_box)).collect();
    let mut rows = Vec::with_capacity(samples * features);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        rows.extend(centers[c * features..(c + 1) * features].iter().map(|m| m + noise.sample(&mut rng)));
        labels.push(c);
    }
    build_batch(rows, features, labels, classes)
}

pub fn synthetic_moons<T: Scalar>(samples: usize, noise: f64, seed: u64) -> Result<Batch<T>> {
    if samples < 2 {
        return Err(Error::Config("synthetic-moons needs at least 2 samples".into()));
    }
    let jitter = Normal::new(0.0, noise).map_err(|e| Error::Config(format!("bad noise {noise}: {e}")))?;
    let mut rng = seeding::rng(seed, Stream::Dataset);
    let mut rows = Vec::with_capacity(samples * 2);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let t = rng.random_range(0.0..std::f64::consts::PI);
        let (x, y, c) = if i % 2 == 0 { (t.cos(), t.sin(), 0) } else { (1.0 - t.cos(), 0.5 - t.sin(), 1) };
        rows.push(x + jitter.sample(&mut rng));
        rows.push(y + jitter.sample(&mut rng));
        labels.push(c);
    }
    build_batch(rows, 2, labels, 2)
}

/// A parsed IDX file: dimensions and raw unsigned bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("IDX header truncated".into()))
}

/// Parses an IDX byte buffer whose big-endian magic must equal `expected`.
pub fn parse_idx(bytes: &[u8], expected: u32) -> Result<IdxArray> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::Format(format!(
            "bad IDX magic 0x{magic:08x}, expected 0x{expected:08x} (images use 0x{IDX_IMAGES_MAGIC:08x}, labels 0x{IDX_LABELS_MAGIC:08x})"
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim).map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndim;
    let len: usize = dims.iter().product();
    if bytes.len() != header + len {
        return Err(Error::Format(format!(
            "IDX body has {} bytes, dimensions {dims:?} need {len}",
            bytes.len() - header
        )));
    }
    Ok(IdxArray { magic, dims, data: bytes[header..].to_vec() })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Images scaled by 1/255 with sample shape `[1, rows, cols]`.
pub fn read_idx_pair<T: Scalar>(images: &Path, labels: &Path, classes: Option<usize>) -> Result<Batch<T>> {
    let img = parse_idx(&read_file(images)?, IDX_IMAGES_MAGIC)?;
    let lab = parse_idx(&read_file(labels)?, IDX_LABELS_MAGIC)?;
    let (n, rows, cols) = (img.dims[0], img.dims[1], img.dims[2]);
    if lab.dims[0] != n {
        return Err(Error::Format(format!("{n} images but {} labels", lab.dims[0])));
    }
    let labels: Vec<usize> = lab.data.iter().map(|&y| y as usize).collect();
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let inputs = Tensor::new(vec![n, 1, rows, cols], img.data.iter().map(|&p| T::from_acc(p as f64 / 255.0)).collect())?;
    Batch::new(inputs, labels, classes)
}

/// Every row as numeric features followed by an integer label.
pub fn read_csv_dataset<T: Scalar>(path: &Path, has_header: bool, classes: Option<usize>) -> Result<Batch<T>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(has_header).trim(csv::Trim::All).from_path(path)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() < 2 {
            return Err(Error::Format(format!("csv row {line} needs features and a label")));
        }
        let w = *width.get_or_insert(record.len() - 1);
        if record.len() - 1 != w {
            return Err(Error::Format(format!("csv row {line} has {} columns, expected {}", record.len(), w + 1)));
        }
        for field in record.iter().take(w) {
            rows.push(field.parse::<f64>().map_err(|e| Error::Format(format!("csv row {line}: {field:?}: {e}")))?);
        }
        let label = &record[w];
        labels.push(label.parse::<usize>().map_err(|e| Error::Format(format!("csv row {line}: label {label:?}: {e}")))?);
    }
    let width = width.ok_or_else(|| Error::Format(format!("{} has no data rows", path.display())))?;
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    build_batch(rows, width, labels, classes)
}

/// Seeded mini-batch index order for one epoch.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
