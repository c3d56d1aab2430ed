//! Experiment configuration files.
//!
//! A config is one JSON object. Unknown keys are rejected everywhere, and
//! every range check names the offending field by its path.

use std::path::{Path, PathBuf};

use kdlab_core::analysis::{TemplateSource, DEFAULT_NATURE_THRESHOLD, DEFAULT_T_GRID};
use kdlab_core::data::SelectionPolicy;
use kdlab_core::nn::presets::{self, Dataset};
use kdlab_core::nn::ModelSpec;
use kdlab_core::rng::derive_seed;
use kdlab_core::sweetspot::{RefineConfig, SweepGrid};
use kdlab_core::train::{DistillConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, Result};

pub const DATA_DIR_ENV: &str = "KDLAB_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base seed; every component seed is derived from it.
    #[serde(default)]
    pub seed: u64,
    /// Where artifacts go unless `--out` says otherwise. Not part of the
    /// recorded config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub experiment: Experiment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub id: Dataset,
    /// Defaults to `$KDLAB_DATA_DIR/<id>`, or `data/<id>` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Random subset of the training split (seeded by the run seed).
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    /// Per-channel standardization with training-split statistics.
    #[serde(default)]
    pub standardize: bool,
}

impl DatasetConfig {
    pub fn resolved_dir(&self) -> PathBuf {
        match &self.dir {
            Some(d) => d.clone(),
            None => match std::env::var_os(DATA_DIR_ENV) {
                Some(root) => PathBuf::from(root).join(self.id.id()),
                None => PathBuf::from("data").join(self.id.id()),
            },
        }
    }
}

/// A model by preset name (see `presets::names`) or spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelRef {
    Preset(String),
    Inline(ModelSpec),
}

impl ModelRef {
    pub fn resolve(&self) -> Result<ModelSpec> {
        let spec = match self {
            ModelRef::Preset(name) => presets::by_name(name).ok_or_else(|| {
                CliError::Config(format!("unknown preset '{name}'; valid presets: {}", presets::names().join(", ")))
            })?,
            ModelRef::Inline(spec) => spec.clone(),
        };
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }

    pub fn label(&self) -> String {
        match self {
            ModelRef::Preset(name) => name.clone(),
            ModelRef::Inline(_) => "inline".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherSource {
    /// A `.kdlb` file from an earlier run.
    Checkpoint(PathBuf),
    /// Trained as the first step of this run.
    Train { model: ModelRef, config: TrainConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTeacher {
    pub name: String,
    pub source: TeacherSource,
}

fn default_t() -> f64 {
    9.0
}

fn default_grid() -> Vec<f64> {
    DEFAULT_T_GRID.to_vec()
}

fn default_threshold() -> f64 {
    DEFAULT_NATURE_THRESHOLD
}

fn default_policy() -> SelectionPolicy {
    SelectionPolicy::EntropyRanked
}

fn default_projection_examples() -> usize {
    300
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainTeacherExperiment {
    #[serde(default = "default_teacher_name")]
    pub name: String,
    pub model: ModelRef,
    pub train: TrainConfig,
}

fn default_teacher_name() -> String {
    "teacher".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    /// Examples per class; `None` keeps the whole training split.
    #[serde(default)]
    pub per_class: Option<usize>,
    #[serde(default = "default_policy")]
    pub policy: SelectionPolicy,
    /// Temperature of the entropy ranking.
    #[serde(default = "default_t")]
    pub t_sel: f64,
    /// Class removed from the transfer set before selection.
    #[serde(default)]
    pub missing_class: Option<usize>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            per_class: None,
            policy: default_policy(),
            t_sel: default_t(),
            missing_class: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillExperiment {
    pub teacher: NamedTeacher,
    pub student: ModelRef,
    pub distill: DistillConfig,
    #[serde(default)]
    pub transfer: TransferConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyScanExperiment {
    pub teachers: Vec<NamedTeacher>,
    #[serde(default = "default_grid")]
    pub temperatures: Vec<f64>,
    /// Training examples scanned (from the front); all when unset.
    #[serde(default)]
    pub examples: Option<usize>,
    /// Temperature of the variance and nature diagnostics.
    #[serde(default = "default_t")]
    pub reference_t: f64,
    #[serde(default = "default_threshold")]
    pub nature_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingClassExperiment {
    pub class: usize,
    #[serde(default = "default_grid")]
    pub temperatures: Vec<f64>,
    pub teachers: Vec<NamedTeacher>,
    pub student: ModelRef,
    /// Its temperature is replaced by each grid temperature in turn.
    pub distill: DistillConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSweepExperiment {
    pub teachers: Vec<NamedTeacher>,
    pub student: ModelRef,
    pub distill: DistillConfig,
    pub per_class: Vec<usize>,
    #[serde(default = "default_policy")]
    pub policy: SelectionPolicy,
    #[serde(default = "default_t")]
    pub t_sel: f64,
    /// Reports, per teacher, the fewest examples per class reaching it.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectExperiment {
    pub teachers: Vec<NamedTeacher>,
    /// Drawn from the run seed when unset.
    #[serde(default)]
    pub classes: Option<[usize; 3]>,
    #[serde(default = "default_projection_examples")]
    pub per_class: usize,
    #[serde(default)]
    pub templates: TemplateSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweetSpotExperiment {
    pub model: ModelRef,
    pub grid: SweepGrid,
    #[serde(default)]
    pub refine: RefineConfig,
    /// Keep every successful cell's checkpoint under `checkpoints/`.
    #[serde(default = "default_true")]
    pub save_checkpoints: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    TrainTeacher(TrainTeacherExperiment),
    Distill(DistillExperiment),
    EntropyScan(EntropyScanExperiment),
    MissingClass(MissingClassExperiment),
    TransferSweep(TransferSweepExperiment),
    Project(ProjectExperiment),
    SweetSpot(SweetSpotExperiment),
}

/// The tagged enum buffers its content, which hides where inside
/// `experiment` deserialization failed. Re-reading the variant on its own
/// recovers the full field path.
fn experiment_error(text: &str) -> Option<CliError> {
    fn variant<T: serde::de::DeserializeOwned>(body: serde_json::Value) -> Option<CliError> {
        let err = serde_path_to_error::deserialize::<_, T>(body).err()?;
        let path = err.path().to_string();
        let at = if path == "." { "experiment".to_string() } else { format!("experiment.{path}") };
        Some(CliError::Config(format!("{at}: {}", err.into_inner())))
    }
    let root: serde_json::Value = serde_json::from_str(text).ok()?;
    let mut body = root.get("experiment")?.as_object()?.clone();
    let kind = body.remove("kind")?;
    let body = serde_json::Value::Object(body);
    match kind.as_str()? {
        "train-teacher" => variant::<TrainTeacherExperiment>(body),
        "distill" => variant::<DistillExperiment>(body),
        "entropy-scan" => variant::<EntropyScanExperiment>(body),
        "missing-class" => variant::<MissingClassExperiment>(body),
        "transfer-sweep" => variant::<TransferSweepExperiment>(body),
        "project" => variant::<ProjectExperiment>(body),
        "sweet-spot" => variant::<SweetSpotExperiment>(body),
        _ => None,
    }
}

impl Experiment {
    pub const KINDS: [&'static str; 7] = [
        "train-teacher",
        "distill",
        "entropy-scan",
        "missing-class",
        "transfer-sweep",
        "project",
        "sweet-spot",
    ];

    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::TrainTeacher(_) => "train-teacher",
            Experiment::Distill(_) => "distill",
            Experiment::EntropyScan(_) => "entropy-scan",
            Experiment::MissingClass(_) => "missing-class",
            Experiment::TransferSweep(_) => "transfer-sweep",
            Experiment::Project(_) => "project",
            Experiment::SweetSpot(_) => "sweet-spot",
        }
    }
}

/// Seed streams, one per kind of component.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const TEACHER: u64 = 2;
    pub const STUDENT: u64 = 3;
    pub const SELECTION: u64 = 4;
    pub const PROJECTION: u64 = 5;
    pub const SWEEP: u64 = 6;
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "experiment" {
                if let Some(inner) = experiment_error(text) {
                    return inner;
                }
            }
            if path == "." {
                CliError::Config(e.into_inner().to_string())
            } else {
                CliError::Config(format!("{path}: {}", e.into_inner()))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| e.context(path.display()))
    }

    /// Seed of component `index` on `stream`, mixed with the seed the
    /// component's own config carries.
    pub fn component_seed(&self, stream: u64, index: usize, own: u64) -> u64 {
        derive_seed(self.seed, &[stream, index as u64, own])
    }

    /// The config as recorded: output location dropped, data directory
    /// resolved.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.output_dir = None;
        cfg.dataset.dir = Some(self.dataset.resolved_dir());
        cfg
    }

    /// SHA-256 of the canonical JSON (sorted keys) of the resolved config.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self.resolved()).expect("config serializes");
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let input = self.dataset.id.input_shape();
        let classes = 10;
        let check_model = |field: &str, m: &ModelRef| -> Result<()> {
            let spec = m.resolve().map_err(|e| e.context(field))?;
            if spec.input_shape != input {
                return Err(CliError::Config(format!(
                    "{field}: model input {:?} does not match {} images {:?}",
                    spec.input_shape, self.dataset.id, input
                )));
            }
            if spec.classes() != classes {
                return Err(CliError::Config(format!("{field}: model emits {} classes, dataset has {classes}", spec.classes())));
            }
            Ok(())
        };
        let check_train = |field: &str, t: &TrainConfig| -> Result<()> {
            t.validate().map_err(|e| CliError::Config(format!("{field}: {e}")))
        };
        let check_distill = |field: &str, d: &DistillConfig| -> Result<()> {
            d.validate().map_err(|e| CliError::Config(format!("{field}: {e}")))
        };
        let check_teachers = |field: &str, ts: &[NamedTeacher]| -> Result<()> {
            if ts.is_empty() {
                return Err(CliError::Config(format!("{field}: at least one teacher is required")));
            }
            for (i, t) in ts.iter().enumerate() {
                let f = format!("{field}[{i}]");
                if t.name.is_empty() || !t.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                    return Err(CliError::Config(format!("{f}.name: use letters, digits, '-' or '_', got '{}'", t.name)));
                }
                if ts[..i].iter().any(|o| o.name == t.name) {
                    return Err(CliError::Config(format!("{f}.name: duplicate teacher name '{}'", t.name)));
                }
                if let TeacherSource::Train { model, config } = &t.source {
                    check_model(&format!("{f}.source.train.model"), model)?;
                    check_train(&format!("{f}.source.train.config"), config)?;
                }
            }
            Ok(())
        };
        let check_temps = |field: &str, ts: &[f64]| -> Result<()> {
            if ts.is_empty() {
                return Err(CliError::Config(format!("{field}: empty temperature grid")));
            }
            match ts.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
                Some(t) => Err(CliError::Config(format!("{field}: temperatures must be positive, got {t}"))),
                None => Ok(()),
            }
        };
        let check_class = |field: &str, k: usize| -> Result<()> {
            if k >= classes {
                return Err(CliError::Config(format!("{field}: class {k} is out of range for {classes} classes")));
            }
            Ok(())
        };
        let positive = |field: &str, v: f64| -> Result<()> {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Config(format!("{field}: must be positive, got {v}")));
            }
            Ok(())
        };

        for (field, limit) in [("dataset.train_limit", self.dataset.train_limit), ("dataset.test_limit", self.dataset.test_limit)] {
            if limit == Some(0) {
                return Err(CliError::Config(format!("{field}: must be at least 1")));
            }
        }

        match &self.experiment {
            Experiment::TrainTeacher(x) => {
                check_model("experiment.model", &x.model)?;
                check_train("experiment.train", &x.train)?;
            }
            Experiment::Distill(x) => {
                check_teachers("experiment.teacher", std::slice::from_ref(&x.teacher))?;
                check_model("experiment.student", &x.student)?;
                check_distill("experiment.distill", &x.distill)?;
                positive("experiment.transfer.t_sel", x.transfer.t_sel)?;
                if x.transfer.per_class == Some(0) {
                    return Err(CliError::Config("experiment.transfer.per_class: must be at least 1".into()));
                }
                if let Some(k) = x.transfer.missing_class {
                    check_class("experiment.transfer.missing_class", k)?;
                }
            }
            Experiment::EntropyScan(x) => {
                check_teachers("experiment.teachers", &x.teachers)?;
                check_temps("experiment.temperatures", &x.temperatures)?;
                positive("experiment.reference_t", x.reference_t)?;
                if !(x.nature_threshold >= 0.0) {
                    return Err(CliError::Config(format!(
                        "experiment.nature_threshold: must be non-negative, got {}",
                        x.nature_threshold
                    )));
                }
                if x.examples == Some(0) {
                    return Err(CliError::Config("experiment.examples: must be at least 1".into()));
                }
            }
            Experiment::MissingClass(x) => {
                check_class("experiment.class", x.class)?;
                check_temps("experiment.temperatures", &x.temperatures)?;
                check_teachers("experiment.teachers", &x.teachers)?;
                check_model("experiment.student", &x.student)?;
                check_distill("experiment.distill", &x.distill)?;
            }
            Experiment::TransferSweep(x) => {
                check_teachers("experiment.teachers", &x.teachers)?;
                check_model("experiment.student", &x.student)?;
                check_distill("experiment.distill", &x.distill)?;
                positive("experiment.t_sel", x.t_sel)?;
                if x.per_class.is_empty() || x.per_class.contains(&0) || x.per_class.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(CliError::Config(
                        "experiment.per_class: must be a non-empty, strictly increasing list of positive counts".into(),
                    ));
                }
                if let Some(a) = x.target_accuracy {
                    if !(a > 0.0 && a <= 1.0) {
                        return Err(CliError::Config(format!("experiment.target_accuracy: must lie in (0, 1], got {a}")));
                    }
                }
            }
            Experiment::Project(x) => {
                check_teachers("experiment.teachers", &x.teachers)?;
                if let Some(cs) = x.classes {
                    for (i, &k) in cs.iter().enumerate() {
                        check_class(&format!("experiment.classes[{i}]"), k)?;
                    }
                    if cs[0] == cs[1] || cs[1] == cs[2] || cs[0] == cs[2] {
                        return Err(CliError::Config(format!("experiment.classes: must be distinct, got {cs:?}")));
                    }
                }
                if x.per_class < 2 {
                    return Err(CliError::Config("experiment.per_class: must be at least 2".into()));
                }
            }
            Experiment::SweetSpot(x) => {
                check_model("experiment.model", &x.model)?;
                check_train("experiment.grid.base", &x.grid.base)?;
                x.grid.validate().map_err(|e| CliError::Config(format!("experiment.grid: {e}")))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn distill_json(alpha: &str) -> String {
        format!(
            r#"{{
              "seed": 3,
              "dataset": {{"id": "mnist", "dir": "/nowhere"}},
              "experiment": {{
                "kind": "distill",
                "teacher": {{"name": "small", "source": {{"checkpoint": "t.kdlb"}}}},
                "student": {{"preset": "mnist-general-desk"}},
                "distill": {{"alpha_kd": {alpha}, "temperature": 9, "student": {{"batch_size": 32, "epochs": 1}}}}
              }}
            }}"#
        )
    }

    #[test]
    fn well_formed_config_parses() {
        let cfg = ExperimentConfig::from_json(&distill_json("0.99")).unwrap();
        assert_eq!(cfg.experiment.kind(), "distill");
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn out_of_range_alpha_names_the_field() {
        let err = ExperimentConfig::from_json(&distill_json("1.5")).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let msg = err.to_string();
        assert!(msg.contains("alpha_kd"), "{msg}");
        assert!(msg.contains("experiment.distill"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let text = distill_json("0.99").replace("\"temperature\": 9", "\"temperature\": 9, \"tempreature\": 3");
        let msg = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(msg.contains("tempreature"), "{msg}");
        let text = distill_json("0.99").replace("\"seed\": 3", "\"seed\": 3, \"sed\": 1");
        let msg = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(msg.contains("sed"), "{msg}");
    }

    #[test]
    fn type_errors_inside_the_experiment_carry_the_full_path() {
        let text = distill_json("0.99").replace("\"epochs\": 1", "\"epochs\": \"one\"");
        let msg = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(msg.contains("experiment.distill.student.epochs"), "{msg}");
    }

    #[test]
    fn unknown_kind_and_preset_are_config_errors() {
        let text = distill_json("0.99").replace("\"kind\": \"distill\"", "\"kind\": \"distil\"");
        assert_eq!(ExperimentConfig::from_json(&text).unwrap_err().exit_code(), 1);
        let text = distill_json("0.99").replace("mnist-general-desk", "mnist-huge");
        let msg = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(msg.contains("experiment.student") && msg.contains("mnist-general-desk"), "{msg}");
    }

    #[test]
    fn preset_for_the_wrong_dataset_is_rejected() {
        let text = distill_json("0.99").replace("mnist-general-desk", "cifar10-general-desk");
        let msg = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(msg.contains("does not match"), "{msg}");
    }

    #[test]
    fn hash_ignores_output_dir_but_not_seed() {
        let a = ExperimentConfig::from_json(&distill_json("0.99")).unwrap();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 4;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn resolved_config_round_trips() {
        let a = ExperimentConfig::from_json(&distill_json("0.99")).unwrap().resolved();
        let text = serde_json::to_string(&a).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), a);
    }

    #[test]
    fn component_seeds_differ_by_stream_and_index() {
        let a = ExperimentConfig::from_json(&distill_json("0.99")).unwrap();
        let s = a.component_seed(streams::TEACHER, 0, 0);
        assert_ne!(s, a.component_seed(streams::STUDENT, 0, 0));
        assert_ne!(s, a.component_seed(streams::TEACHER, 1, 0));
        assert_ne!(s, a.component_seed(streams::TEACHER, 0, 1));
        assert_eq!(s, a.component_seed(streams::TEACHER, 0, 0));
    }
}
