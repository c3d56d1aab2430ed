//! Teacher training, soft-label generation, offline distillation,
//! evaluation and checkpoint files.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{DataError, LabeledDataset, TransferSet};
use crate::losses::{self, argmax, cross_entropy_loss, kd_loss, ls_loss, softmax_t, Distribution, LossConfig, LossError};
use crate::nn::{BatchNormStats, LayerSpec, Mode, Model, ModelSpec, NnError};
use crate::optim::{OptimError, Optimizer, OptimizerConfig};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Divergence { epoch: usize, step: usize },
    #[error("soft labels were generated at T = {soft}, distillation expects T = {config}")]
    TemperatureMismatch { soft: f64, config: f64 },
    #[error("soft labels do not match the transfer set: {0}")]
    TransferMismatch(String),
    #[error("model input {model:?} does not match dataset examples {data:?}")]
    ShapeMismatch { model: Vec<usize>, data: Vec<usize> },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainLoss {
    CrossEntropy,
    Ls { alpha_ls: f64 },
}

fn default_reference_t() -> f64 {
    9.0
}

fn default_probe() -> usize {
    1000
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    #[serde(default = "cross_entropy")]
    pub loss: TrainLoss,
    /// Temperature of the per-epoch soft-label entropy in the history.
    #[serde(default = "default_reference_t")]
    pub reference_t: f64,
    /// Examples (taken from the front of the training set) used for that
    /// entropy; 0 disables it.
    #[serde(default = "default_probe")]
    pub entropy_probe: usize,
}

fn cross_entropy() -> TrainLoss {
    TrainLoss::CrossEntropy
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 10,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            shuffle: true,
            loss: TrainLoss::CrossEntropy,
            reference_t: default_reference_t(),
            entropy_probe: default_probe(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if let TrainLoss::Ls { alpha_ls } = self.loss {
            if !(0.0..=1.0).contains(&alpha_ls) {
                return Err(TrainError::Config(format!("alpha_ls must lie in [0, 1], got {alpha_ls}")));
            }
        }
        if !(self.reference_t > 0.0) {
            return Err(TrainError::Config(format!("reference_t must be positive, got {}", self.reference_t)));
        }
        self.optimizer.validate()?;
        Ok(())
    }
}

fn default_alpha_kd() -> f64 {
    0.99
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_alpha_kd")]
    pub alpha_kd: f64,
    #[serde(default = "default_reference_t")]
    pub temperature: f64,
    #[serde(default = "default_true")]
    pub kl_t_squared: bool,
    pub student: TrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha_kd: default_alpha_kd(),
            temperature: default_reference_t(),
            kl_t_squared: true,
            student: TrainConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha_kd: self.alpha_kd,
            temperature: self.temperature,
            kl_t_squared: self.kl_t_squared,
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        self.student.validate()
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches, weighted by batch size.
    pub loss: f64,
    /// Accuracy of the train-mode predictions made during the epoch.
    pub train_accuracy: f64,
    /// Mean soft-label entropy at the reference temperature on the probe
    /// examples, after the epoch.
    pub mean_entropy: Option<f64>,
}

/// What produced a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub role: String,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub distill: Option<DistillConfig>,
    #[serde(default)]
    pub teacher_id: Option<String>,
    #[serde(default)]
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub provenance: Provenance,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"KDLB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ModelSpec,
    provenance: Provenance,
    param_count: usize,
    stat_count: usize,
    train_accuracy: Option<f64>,
    test_accuracy: Option<f64>,
}

impl Checkpoint {
    pub fn new(model: Model<f32>, provenance: Provenance) -> Self {
        Self {
            model,
            provenance,
            train_accuracy: None,
            test_accuracy: None,
        }
    }

    /// `KDLB`, version (u32 LE), header length (u32 LE), JSON header, then
    /// little-endian f32 parameters in layer order followed by each
    /// batch-norm layer's running mean and variance.
    pub fn to_bytes(&self) -> Vec<u8> {
        let stats: Vec<f32> = self
            .model
            .bn_stats()
            .iter()
            .flatten()
            .flat_map(|s| s.mean.iter().chain(&s.var).copied())
            .collect();
        let header = Header {
            spec: self.model.spec().clone(),
            provenance: self.provenance.clone(),
            param_count: self.model.param_count(),
            stat_count: stats.len(),
            train_accuracy: self.train_accuracy,
            test_accuracy: self.test_accuracy,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * (header.param_count + stats.len()));
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.model.flat_params().into_iter().chain(stats) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let word = |at: usize| -> std::result::Result<u32, CheckpointError> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or(CheckpointError::LengthMismatch {
                    expected: at + 4,
                    found: bytes.len(),
                })
        };
        let version = word(4)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header_len = word(8)? as usize;
        let json = bytes.get(12..12 + header_len).ok_or(CheckpointError::LengthMismatch {
            expected: 12 + header_len,
            found: bytes.len(),
        })?;
        let header: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let blob = &bytes[12 + header_len..];
        let expected = 4 * (header.param_count + header.stat_count);
        if blob.len() != expected {
            return Err(CheckpointError::LengthMismatch {
                expected: 12 + header_len + expected,
                found: bytes.len(),
            });
        }
        let mut values = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let spec = header.spec;
        let mut take = |n: usize| -> Vec<f32> { values.by_ref().take(n).collect() };
        let mut params = Vec::with_capacity(spec.layers.len());
        let mut declared = 0;
        for layer in &spec.layers {
            let mut tensors = Vec::new();
            for shape in layer.param_shapes() {
                let n: usize = shape.iter().product();
                declared += n;
                let data = take(n);
                if data.len() != n {
                    return Err(CheckpointError::Header("parameter count disagrees with spec".into()));
                }
                tensors.push(Tensor::new(shape, data).map_err(|e| CheckpointError::Header(e.to_string()))?);
            }
            params.push(tensors);
        }
        if declared != header.param_count {
            return Err(CheckpointError::Header(format!(
                "header declares {} parameters, spec has {declared}",
                header.param_count
            )));
        }
        let bn = spec
            .layers
            .iter()
            .map(|layer| match layer {
                LayerSpec::BatchNorm { channels, .. } => Some(BatchNormStats {
                    mean: take(*channels),
                    var: take(*channels),
                }),
                _ => None,
            })
            .collect();
        let mut model = Model::from_parts(&spec, params, bn).map_err(|e| CheckpointError::Header(e.to_string()))?;
        model.set_mode(Mode::Eval);
        Ok(Self {
            model,
            provenance: header.provenance,
            train_accuracy: header.train_accuracy,
            test_accuracy: header.test_accuracy,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> std::result::Result<(), CheckpointError> {
        let path = path.as_ref();
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("kdlb.tmp");
        fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(&self.to_bytes()).and_then(|_| f.sync_all()))
            .map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> std::result::Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// First 16 hex digits of the SHA-256 of the serialized checkpoint.
    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Teacher responses softened at `temperature`, one row per transfer-set
/// example.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMatrix {
    /// Dataset index of each row.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// `[rows × classes]`.
    pub rows: Tensor<f32>,
    pub temperature: f64,
    pub teacher_id: String,
}

impl SoftLabelMatrix {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.rows.shape().get(1).copied().unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.rows.outer(i)
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    /// Row `i` as a distribution (sum tolerance 1e-5 for `f32` storage).
    pub fn distribution(&self, i: usize) -> Distribution {
        Distribution::with_tolerance(self.row_f64(i), 1e-5).expect("soft-label rows are distributions")
    }

    /// Builds a matrix from explicit rows, checking each is a distribution.
    pub fn from_rows(
        indices: Vec<usize>,
        labels: Vec<usize>,
        rows: Vec<Vec<f64>>,
        temperature: f64,
        teacher_id: impl Into<String>,
    ) -> std::result::Result<Self, LossError> {
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * c);
        for r in &rows {
            if r.len() != c {
                return Err(LossError::DimensionMismatch { left: c, right: r.len() });
            }
            Distribution::with_tolerance(r.clone(), 1e-5)?;
            data.extend(r.iter().map(|&v| v as f32));
        }
        if indices.len() != rows.len() || labels.len() != rows.len() {
            return Err(LossError::DimensionMismatch {
                left: rows.len(),
                right: indices.len().min(labels.len()),
            });
        }
        Ok(Self {
            indices,
            labels,
            rows: Tensor::new(vec![rows.len(), c], data).expect("row lengths checked"),
            temperature,
            teacher_id: teacher_id.into(),
        })
    }

    /// CSV with header `index,label,p_0,…,p_{C−1},T`; floats in shortest
    /// round-trip form.
    pub fn to_csv(&self) -> String {
        let c = self.classes();
        let mut s = String::from("index,label");
        for j in 0..c {
            let _ = write!(s, ",p_{j}");
        }
        s.push_str(",T\n");
        for i in 0..self.len() {
            let _ = write!(s, "{},{}", self.indices[i], self.labels[i]);
            for v in self.row(i) {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{}", self.temperature);
        }
        s
    }

    pub fn from_csv(text: &str, teacher_id: impl Into<String>) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty file")?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[0] != "index" || cols[1] != "label" || cols[cols.len() - 1] != "T" {
            return Err(format!("unexpected header '{header}'"));
        }
        let c = cols.len() - 3;
        let (mut indices, mut labels, mut data) = (Vec::new(), Vec::new(), Vec::new());
        let mut temperature = None;
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != c + 3 {
                return Err(format!("line {}: expected {} fields", n + 2, c + 3));
            }
            let bad = |e: &dyn std::fmt::Display| format!("line {}: {e}", n + 2);
            indices.push(f[0].parse::<usize>().map_err(|e| bad(&e))?);
            labels.push(f[1].parse::<usize>().map_err(|e| bad(&e))?);
            for v in &f[2..2 + c] {
                data.push(v.parse::<f32>().map_err(|e| bad(&e))?);
            }
            let t: f64 = f[c + 2].parse().map_err(|e| bad(&e))?;
            if temperature.is_some_and(|prev| prev != t) {
                return Err(format!("line {}: temperature changes", n + 2));
            }
            temperature = Some(t);
        }
        let rows = indices.len();
        Ok(Self {
            indices,
            labels,
            rows: Tensor::new(vec![rows, c], data).map_err(|e| e.to_string())?,
            temperature: temperature.unwrap_or(f64::NAN),
            teacher_id: teacher_id.into(),
        })
    }
}

fn check_compatible(spec: &ModelSpec, ds: &LabeledDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if spec.input_shape != ds.example_shape() {
        return Err(TrainError::ShapeMismatch {
            model: spec.input_shape.clone(),
            data: ds.example_shape().to_vec(),
        });
    }
    Ok(())
}

/// Logit rows as `f64`.
fn logit_rows(logits: &Tensor<f32>) -> impl Iterator<Item = Vec<f64>> + '_ {
    (0..logits.shape()[0]).map(move |i| logits.outer(i).iter().map(|&v| v as f64).collect())
}

/// Mean entropy of `softmax(z / t)` over `examples` of `ds`.
pub fn mean_entropy(model: &Model<f32>, ds: &LabeledDataset, t: f64, examples: usize) -> Result<f64> {
    let n = examples.min(ds.len());
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let idx: Vec<usize> = (0..n).collect();
    let logits = model.predict_logits(&ds.images.gather(&idx), 256)?;
    let mut sum = 0.0;
    for z in logit_rows(&logits) {
        sum += losses::entropy(&softmax_t(&z, t)?);
    }
    Ok(sum / n as f64)
}

/// Mini-batch training of `model` on `ds` against a per-row objective.
///
/// `objective(row, logits)` returns the loss of dataset row `row` and its
/// logit gradient. The batch loss is the mean over the batch, so each row's
/// gradient is divided by the batch size. The last partial batch is kept.
fn fit<F>(model: &mut Model<f32>, ds: &LabeledDataset, cfg: &TrainConfig, objective: F) -> Result<Vec<EpochRecord>>
where
    F: Fn(usize, &[f64]) -> std::result::Result<losses::LossValue, LossError>,
{
    let root = SeededRng::new(cfg.seed);
    let mut order_rng = root.child(1);
    let mut dropout_rng = root.child(2);
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let n = ds.len();
    let c = model.spec().classes();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        model.set_mode(Mode::Train);
        if cfg.shuffle {
            order_rng.shuffle(&mut order);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (step, rows) in order.chunks(cfg.batch_size).enumerate() {
            let b = rows.len();
            let batch = ds.images.gather(rows);
            let pass = model.forward(&batch, Some(&mut dropout_rng))?;
            let mut grad = Vec::with_capacity(b * c);
            let mut batch_loss = 0.0;
            for (k, z) in logit_rows(&pass.logits).enumerate() {
                let row = rows[k];
                let l = match objective(row, &z) {
                    Err(LossError::NonFiniteLogits) => return Err(TrainError::Divergence { epoch, step }),
                    other => other?,
                };
                batch_loss += l.value;
                grad.extend(l.grad.iter().map(|g| (g / b as f64) as f32));
                if argmax(&z) == ds.labels[row] {
                    correct += 1;
                }
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::Divergence { epoch, step });
            }
            loss_sum += batch_loss;
            let grads = model.backward(&pass, &Tensor::new(vec![b, c], grad).expect("b×c gradient"))?;
            opt.step(model.params_mut(), &grads);
        }
        model.set_mode(Mode::Eval);
        let mean_entropy = if cfg.entropy_probe > 0 {
            Some(mean_entropy(model, ds, cfg.reference_t, cfg.entropy_probe)?)
        } else {
            None
        };
        history.push(EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            mean_entropy,
        });
    }
    model.set_mode(Mode::Eval);
    Ok(history)
}

fn init_model(spec: &ModelSpec, seed: u64) -> Result<Model<f32>> {
    Ok(Model::init(spec, &mut SeededRng::new(seed))?)
}

/// Trains a fresh model of `spec` on `ds` with the configured loss.
pub fn train_teacher(spec: &ModelSpec, ds: &LabeledDataset, cfg: &TrainConfig) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    cfg.validate()?;
    check_compatible(spec, ds)?;
    let mut model = init_model(spec, cfg.seed)?;
    let classes = spec.classes();
    let loss = cfg.loss;
    let ls_cfg = LossConfig {
        alpha_ls: match loss {
            TrainLoss::Ls { alpha_ls } => alpha_ls,
            TrainLoss::CrossEntropy => 0.0,
        },
        ..LossConfig::default()
    };
    let history = fit(&mut model, ds, cfg, |row, z| {
        let q = Distribution::one_hot(ds.labels[row], classes)?;
        match loss {
            TrainLoss::CrossEntropy => cross_entropy_loss(&q, z),
            TrainLoss::Ls { .. } => ls_loss(&q, z, &ls_cfg),
        }
    })?;
    let mut ckpt = Checkpoint::new(
        model,
        Provenance {
            role: "teacher".into(),
            train: Some(*cfg),
            examples: ds.len(),
            ..Provenance::default()
        },
    );
    ckpt.train_accuracy = history.last().map(|h| h.train_accuracy);
    Ok((ckpt, history))
}

/// Eval-mode teacher responses on the transfer set, softened at `t`.
pub fn generate_soft_labels(teacher: &Checkpoint, ds: &LabeledDataset, ts: &TransferSet, t: f64) -> Result<SoftLabelMatrix> {
    if !(t > 0.0) {
        return Err(LossError::NonPositiveTemperature(t).into());
    }
    check_compatible(teacher.model.spec(), ds)?;
    let logits = teacher.model.predict_logits(&ds.images.gather(&ts.indices), 256)?;
    let c = teacher.model.spec().classes();
    let mut data = Vec::with_capacity(ts.len() * c);
    for z in logit_rows(&logits) {
        data.extend(softmax_t(&z, t)?.probs().iter().map(|&p| p as f32));
    }
    Ok(SoftLabelMatrix {
        indices: ts.indices.clone(),
        labels: ts.indices.iter().map(|&i| ds.labels[i]).collect(),
        rows: Tensor::new(vec![ts.len(), c], data).expect("rows × classes"),
        temperature: t,
        teacher_id: teacher.id(),
    })
}

/// Trains a fresh student of `spec` on the transfer set against the
/// distillation loss.
pub fn distill_student(
    spec: &ModelSpec,
    ds: &LabeledDataset,
    ts: &TransferSet,
    soft: &SoftLabelMatrix,
    dcfg: &DistillConfig,
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    dcfg.validate()?;
    if soft.temperature != dcfg.temperature {
        return Err(TrainError::TemperatureMismatch {
            soft: soft.temperature,
            config: dcfg.temperature,
        });
    }
    if soft.indices != ts.indices {
        return Err(TrainError::TransferMismatch(format!(
            "{} soft-label rows for {} transfer examples",
            soft.len(),
            ts.len()
        )));
    }
    if soft.classes() != spec.classes() {
        return Err(TrainError::TransferMismatch(format!(
            "{} soft-label classes, student has {}",
            soft.classes(),
            spec.classes()
        )));
    }
    let subset = ds.subset(&ts.indices);
    check_compatible(spec, &subset)?;
    let mut model = init_model(spec, dcfg.student.seed)?;
    let classes = spec.classes();
    let teacher: Vec<Distribution> = (0..soft.len()).map(|i| soft.distribution(i)).collect();
    let loss_cfg = dcfg.loss_config();
    let history = fit(&mut model, &subset, &dcfg.student, |row, z| {
        let q = Distribution::one_hot(subset.labels[row], classes)?;
        kd_loss(&q, &teacher[row], z, &loss_cfg)
    })?;
    let mut ckpt = Checkpoint::new(
        model,
        Provenance {
            role: "student".into(),
            distill: Some(*dcfg),
            teacher_id: Some(soft.teacher_id.clone()),
            examples: subset.len(),
            ..Provenance::default()
        },
    );
    ckpt.train_accuracy = history.last().map(|h| h.train_accuracy);
    Ok((ckpt, history))
}

/// Overall and per-class accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes absent from the evaluated data.
    pub per_class: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

/// Scores predicted classes against labels.
pub fn score_predictions(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut counts = vec![0usize; classes];
    let mut hits = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        counts[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    Ok(Evaluation {
        accuracy: hits.iter().sum::<usize>() as f64 / labels.len() as f64,
        per_class: (0..classes)
            .map(|c| (counts[c] > 0).then(|| hits[c] as f64 / counts[c] as f64))
            .collect(),
        counts,
    })
}

/// Eval-mode argmax predictions (ties to the lowest class).
pub fn predict_classes(model: &Model<f32>, ds: &LabeledDataset) -> Result<Vec<usize>> {
    check_compatible(model.spec(), ds)?;
    let logits = model.predict_logits(&ds.images, 256)?;
    Ok(logit_rows(&logits).map(|z| argmax(&z)).collect())
}

pub fn evaluate(model: &Model<f32>, ds: &LabeledDataset) -> Result<Evaluation> {
    let preds = predict_classes(model, ds)?;
    score_predictions(&preds, &ds.labels, ds.classes)
}
