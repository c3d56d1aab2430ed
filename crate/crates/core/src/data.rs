//! Labeled image datasets: IDX and CIFAR-10 binary loaders, class removal
//! and transfer-set selection.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{entropy, softmax_t};
use crate::nn::{Model, NnError};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3072;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated, expected {expected} bytes but found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is not below {classes}")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("{path}: size {len} is not a multiple of the {record}-byte record")]
    RecordSize { path: PathBuf, len: usize, record: usize },
    #[error("missing files in {dir}: {}", missing.join(", "))]
    MissingFiles { dir: PathBuf, missing: Vec<String> },
    #[error("dataset is empty")]
    Empty,
    #[error("class {class} is out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("class {0} has no examples")]
    ClassAbsent(usize),
    #[error("class {class} has {available} examples, {requested} requested")]
    InsufficientExamples { class: usize, available: usize, requested: usize },
    #[error("entropy-ranked selection needs a teacher")]
    MissingTeacher,
    #[error("selection temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("teacher: {0}")]
    Teacher(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0, 1]` with shape `[N, c, h, w]` and one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(DataError::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::LabelOutOfRange { index, label, classes });
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape `[c, h, w]`.
    pub fn example_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// The examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// `n` examples drawn uniformly without replacement, kept in dataset
    /// order.
    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(n.min(self.len()));
        idx.sort_unstable();
        self.subset(&idx)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a file, gunzipping when the name ends in `.gz`.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(io_err(path))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io_err(path))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn check_len(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_len(path, bytes, 16)?;
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let (n, rows, cols) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    check_len(path, bytes, 16 + n * rows * cols)?;
    Ok((n, rows, cols, bytes[16..16 + n * rows * cols].to_vec()))
}

fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    check_len(path, bytes, 8)?;
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4) as usize;
    check_len(path, bytes, 8 + n)?;
    Ok(bytes[8..8 + n].to_vec())
}

fn scale(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|&p| p as f32 / 255.0).collect()
}

/// Loads an IDX image/label pair (MNIST layout, ten classes). The split is
/// `test` when the image file name contains `t10k` or `test`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (n, rows, cols, pixels) = parse_idx_images(ip, &read_maybe_gz(ip)?)?;
    let labels = parse_idx_labels(lp, &read_maybe_gz(lp)?)?;
    if labels.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let name = ip.file_name().map(|s| s.to_string_lossy().to_lowercase()).unwrap_or_default();
    let split = if name.contains("t10k") || name.contains("test") {
        Split::Test
    } else {
        Split::Train
    };
    let images = Tensor::new(vec![n, 1, rows, cols], scale(&pixels)).expect("length checked");
    LabeledDataset::new(images, labels.into_iter().map(usize::from).collect(), 10, split)
}

/// Loads the standard MNIST-style file pair for `split` from `dir`
/// (`train-images-idx3-ubyte[.gz]` and friends).
pub fn load_idx_dir(dir: impl AsRef<Path>, split: Split) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let find = |stem: String| -> Option<PathBuf> {
        [stem.clone(), format!("{stem}.gz")]
            .into_iter()
            .map(|n| dir.join(n))
            .find(|p| p.exists())
    };
    let images = find(format!("{prefix}-images-idx3-ubyte"));
    let labels = find(format!("{prefix}-labels-idx1-ubyte"));
    match (images, labels) {
        (Some(i), Some(l)) => load_idx(i, l),
        (i, l) => {
            let mut missing = Vec::new();
            if i.is_none() {
                missing.push(format!("{prefix}-images-idx3-ubyte[.gz]"));
            }
            if l.is_none() {
                missing.push(format!("{prefix}-labels-idx1-ubyte[.gz]"));
            }
            Err(DataError::MissingFiles {
                dir: dir.to_path_buf(),
                missing,
            })
        }
    }
}

/// Serializes single-channel images (values in `[0, 1]`) and labels as an
/// uncompressed IDX pair.
pub fn write_idx(ds: &LabeledDataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let shape = ds.images.shape();
    let (n, rows, cols) = (shape[0], shape[2], shape[3]);
    let mut img = Vec::with_capacity(16 + ds.images.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    for (path, bytes) in [(images_path.as_ref(), img), (labels_path.as_ref(), lab)] {
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(io_err(path))?;
    }
    Ok(())
}

/// Parses CIFAR-10 binary records: one label byte followed by 1024 red,
/// 1024 green and 1024 blue bytes.
pub fn parse_cifar_records(path: &Path, bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::RecordSize {
            path: path.to_path_buf(),
            len: bytes.len(),
            record: CIFAR_RECORD,
        });
    }
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD * 3072);
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend(scale(&rec[1..]));
    }
    Ok((pixels, labels))
}

/// Loads the CIFAR-10 binary batches for `split` from `dir`.
pub fn load_cifar10(dir: impl AsRef<Path>, split: Split) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let files: Vec<&str> = match split {
        Split::Train => CIFAR_TRAIN_FILES.to_vec(),
        Split::Test => vec![CIFAR_TEST_FILE],
    };
    let missing: Vec<String> = files
        .iter()
        .filter(|f| !dir.join(f).exists())
        .map(|f| f.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(DataError::MissingFiles {
            dir: dir.to_path_buf(),
            missing,
        });
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = dir.join(f);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let (p, l) = parse_cifar_records(&path, &bytes)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, 32, 32], pixels).expect("record size checked");
    LabeledDataset::new(images, labels, 10, split)
}

/// Drops every example of `class`, keeping the order of the rest and the
/// label space.
pub fn remove_class(ds: &LabeledDataset, class: usize) -> Result<LabeledDataset> {
    if ds.is_empty() {
        return Err(DataError::Empty);
    }
    if class >= ds.classes {
        return Err(DataError::ClassOutOfRange {
            class,
            classes: ds.classes,
        });
    }
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] != class).collect();
    if keep.len() == ds.len() {
        return Err(DataError::ClassAbsent(class));
    }
    Ok(ds.subset(&keep))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    Random,
    EntropyRanked,
}

/// Indices into a dataset chosen as the distillation transfer set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSet {
    pub indices: Vec<usize>,
    pub policy: SelectionPolicy,
    pub per_class: usize,
    pub t_sel: f64,
}

impl TransferSet {
    /// Every example of `ds`, in order.
    pub fn all(ds: &LabeledDataset) -> Self {
        Self {
            indices: (0..ds.len()).collect(),
            policy: SelectionPolicy::Random,
            per_class: 0,
            t_sel: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Per-example soft-label entropy of `teacher` at temperature `t`.
pub fn teacher_entropies(teacher: &Model<f32>, ds: &LabeledDataset, t: f64) -> Result<Vec<f64>> {
    let logits = teacher.predict_logits(&ds.images, 256)?;
    Ok((0..ds.len())
        .map(|i| {
            let z: Vec<f64> = logits.outer(i).iter().map(|&v| v as f64).collect();
            entropy(&softmax_t(&z, t).expect("finite logits, positive temperature"))
        })
        .collect())
}

/// Picks `n_per_class` examples of every class present in `ds`.
///
/// `Random` samples each class uniformly without replacement.
/// `EntropyRanked` keeps, per class, the examples whose teacher soft labels
/// at `t_sel` have the highest entropy (ties to the lower index). Classes
/// with no examples are skipped; returned indices are ascending.
pub fn select_transfer_set(
    ds: &LabeledDataset,
    n_per_class: usize,
    policy: SelectionPolicy,
    teacher: Option<&Model<f32>>,
    t_sel: f64,
    rng: &mut SeededRng,
) -> Result<TransferSet> {
    if ds.is_empty() {
        return Err(DataError::Empty);
    }
    let counts = ds.class_counts();
    if let Some((class, &available)) = counts.iter().enumerate().find(|(_, &c)| c > 0 && c < n_per_class) {
        return Err(DataError::InsufficientExamples {
            class,
            available,
            requested: n_per_class,
        });
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut indices = Vec::with_capacity(n_per_class * ds.classes);
    match policy {
        SelectionPolicy::Random => {
            for members in &mut by_class {
                rng.shuffle(members);
                indices.extend_from_slice(&members[..n_per_class.min(members.len())]);
            }
        }
        SelectionPolicy::EntropyRanked => {
            let teacher = teacher.ok_or(DataError::MissingTeacher)?;
            if !(t_sel > 0.0) {
                return Err(DataError::BadTemperature(t_sel));
            }
            let h = teacher_entropies(teacher, ds, t_sel)?;
            for members in &mut by_class {
                members.sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(a.cmp(&b)));
                indices.extend_from_slice(&members[..n_per_class.min(members.len())]);
            }
        }
    }
    indices.sort_unstable();
    Ok(TransferSet {
        indices,
        policy,
        per_class: n_per_class,
        t_sel,
    })
}

/// Per-channel pixel statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    /// Population standard deviation; may be zero.
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Standard deviations with zeros replaced by one, for division.
    pub fn divisors(&self) -> Vec<f64> {
        self.std.iter().map(|&s| if s > 0.0 { s } else { 1.0 }).collect()
    }
}

pub fn normalize_stats(ds: &LabeledDataset) -> Result<ChannelStats> {
    if ds.is_empty() {
        return Err(DataError::Empty);
    }
    let shape = ds.example_shape();
    let channels = shape[0];
    let plane: usize = shape[1..].iter().product();
    let count = (ds.len() * plane) as f64;
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    for ex in ds.images.data().chunks_exact(channels * plane) {
        for c in 0..channels {
            for &v in &ex[c * plane..(c + 1) * plane] {
                let v = v as f64;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / count - m * m).max(0.0).sqrt())
        .collect();
    Ok(ChannelStats { mean, std })
}

/// Applies `(x − mean) / std` per channel in place.
pub fn standardize(ds: &mut LabeledDataset, stats: &ChannelStats) {
    let shape = ds.example_shape().to_vec();
    let plane: usize = shape[1..].iter().product();
    let div = stats.divisors();
    let channels = shape[0];
    for ex in ds.images.data_mut().chunks_exact_mut(channels * plane) {
        for c in 0..channels {
            for v in &mut ex[c * plane..(c + 1) * plane] {
                *v = ((*v as f64 - stats.mean[c]) / div[c]) as f32;
            }
        }
    }
}
