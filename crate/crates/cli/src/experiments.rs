//! The canonical experiments and the runner that records them.

use std::path::PathBuf;

use kdlab_core::analysis::{
    classify_nature, cluster_spread, entropy_curve, penultimate_projection, variance_in_response, EntropyCurve,
    NatureScore, ResponseVarianceReport, TemplateSource, DEFAULT_NATURE_THRESHOLD,
};
use kdlab_core::data::{
    load_cifar10, load_idx_dir, normalize_stats, remove_class, select_transfer_set, standardize, ChannelStats,
    LabeledDataset, SelectionPolicy, Split, TransferSet,
};
use kdlab_core::nn::presets::Dataset;
use kdlab_core::rng::SeededRng;
use kdlab_core::sweetspot::{
    accuracy_floor, entropy_surface_with, refine_sweet_spot, surface_trends, EntropySurface, Spot, SurfaceTrends,
    SweepGrid,
};
use kdlab_core::train::{
    distill_student, evaluate, generate_soft_labels, train_teacher, Checkpoint, DistillConfig, EpochRecord, Evaluation,
    TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::config::{streams, DatasetConfig, Experiment, ExperimentConfig, NamedTeacher, TeacherSource};
use crate::record::{timestamp, Manifest, MetricsRecord, OutputDir, ToolInfo, RECORD_FILE};
use crate::{CliError, Result};

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub dry_run: bool,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub plan: Vec<String>,
    /// `None` for dry runs.
    pub record: Option<MetricsRecord>,
    pub manifest: Option<Manifest>,
}

/// Train and test splits as the experiment sees them.
#[derive(Debug, Clone)]
pub struct Data {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub stats: Option<ChannelStats>,
}

/// Loads, subsamples and optionally standardizes the configured dataset.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Data> {
    let ds: &DatasetConfig = &cfg.dataset;
    let dir = ds.resolved_dir();
    let ctx = |e: CliError| e.context(format!("dataset {} in {}", ds.id, dir.display()));
    let load = |split| -> Result<LabeledDataset> {
        Ok(match ds.id {
            Dataset::Cifar10 => load_cifar10(&dir, split)?,
            Dataset::Mnist | Dataset::FashionMnist => load_idx_dir(&dir, split)?,
        })
    };
    let mut train = load(Split::Train).map_err(ctx)?;
    let mut test = load(Split::Test).map_err(ctx)?;
    if let Some(n) = ds.train_limit {
        train = train.sample(n, &mut SeededRng::new(cfg.component_seed(streams::DATA, 0, 0)));
    }
    if let Some(n) = ds.test_limit {
        test = test.sample(n, &mut SeededRng::new(cfg.component_seed(streams::DATA, 1, 0)));
    }
    let stats = if ds.standardize {
        let s = normalize_stats(&train).map_err(|e| ctx(e.into()))?;
        standardize(&mut train, &s);
        standardize(&mut test, &s);
        Some(s)
    } else {
        None
    };
    Ok(Data { train, test, stats })
}

/// What the record says about a teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub name: String,
    pub checkpoint_id: String,
    /// Output-relative path when trained here, the given path otherwise.
    pub file: String,
    pub trained_here: bool,
    pub seed: Option<u64>,
    pub param_count: usize,
    pub train_accuracy: Option<f64>,
    /// On this run's test split.
    pub test_accuracy: f64,
    pub history: Option<Vec<EpochRecord>>,
}

struct Teacher {
    checkpoint: Checkpoint,
    summary: TeacherSummary,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Data,
    out: &'a mut OutputDir,
    verbose: bool,
}

impl Ctx<'_> {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[kdlab] {}", msg.as_ref());
        }
    }

    fn save_checkpoint(&mut self, rel: &str, ckpt: &Checkpoint) -> Result<()> {
        self.out.write(rel, &ckpt.to_bytes())?;
        Ok(())
    }

    fn teachers(&mut self, list: &[NamedTeacher]) -> Result<Vec<Teacher>> {
        let mut out = Vec::with_capacity(list.len());
        for (i, t) in list.iter().enumerate() {
            let teacher = match &t.source {
                TeacherSource::Checkpoint(path) => {
                    let ckpt = Checkpoint::load(path).map_err(|e| CliError::from(e).context(format!("teacher {}", t.name)))?;
                    let test = evaluate(&ckpt.model, &self.data.test)
                        .map_err(|e| CliError::from(e).context(format!("teacher {}", t.name)))?;
                    Teacher {
                        summary: TeacherSummary {
                            name: t.name.clone(),
                            checkpoint_id: ckpt.id(),
                            file: path.display().to_string(),
                            trained_here: false,
                            seed: ckpt.provenance.train.map(|c| c.seed),
                            param_count: ckpt.model.param_count(),
                            train_accuracy: ckpt.train_accuracy,
                            test_accuracy: test.accuracy,
                            history: None,
                        },
                        checkpoint: ckpt,
                    }
                }
                TeacherSource::Train { model, config } => {
                    let spec = model.resolve()?;
                    let cfg = TrainConfig {
                        seed: self.cfg.component_seed(streams::TEACHER, i, config.seed),
                        ..*config
                    };
                    self.log(format!(
                        "training teacher {} ({}, batch {}, {} epochs, {} examples)",
                        t.name,
                        model.label(),
                        cfg.batch_size,
                        cfg.epochs,
                        self.data.train.len()
                    ));
                    let (mut ckpt, history) = train_teacher(&spec, &self.data.train, &cfg)
                        .map_err(|e| CliError::from(e).context(format!("teacher {}", t.name)))?;
                    let test = evaluate(&ckpt.model, &self.data.test)?;
                    ckpt.test_accuracy = Some(test.accuracy);
                    let rel = format!("teachers/{}.kdlb", t.name);
                    self.save_checkpoint(&rel, &ckpt)?;
                    self.log(format!("teacher {}: test accuracy {:.4}", t.name, test.accuracy));
                    Teacher {
                        summary: TeacherSummary {
                            name: t.name.clone(),
                            checkpoint_id: ckpt.id(),
                            file: rel,
                            trained_here: true,
                            seed: Some(cfg.seed),
                            param_count: ckpt.model.param_count(),
                            train_accuracy: ckpt.train_accuracy,
                            test_accuracy: test.accuracy,
                            history: Some(history),
                        },
                        checkpoint: ckpt,
                    }
                }
            };
            if teacher.checkpoint.model.spec().input_shape != self.data.train.example_shape() {
                return Err(CliError::Data(format!(
                    "teacher {}: input {:?} does not match dataset examples {:?}",
                    t.name,
                    teacher.checkpoint.model.spec().input_shape,
                    self.data.train.example_shape()
                )));
            }
            out.push(teacher);
        }
        Ok(out)
    }

    fn student_config(&self, d: &DistillConfig, temperature: f64) -> DistillConfig {
        DistillConfig {
            temperature,
            student: TrainConfig {
                seed: self.cfg.component_seed(streams::STUDENT, 0, d.student.seed),
                ..d.student
            },
            ..*d
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTeacherPayload {
    pub teacher: TeacherSummary,
    pub test: Evaluation,
    pub data_stats: Option<ChannelStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSummary {
    pub policy: SelectionPolicy,
    pub per_class: Option<usize>,
    pub t_sel: f64,
    pub missing_class: Option<usize>,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentSummary {
    pub checkpoint_id: String,
    pub file: String,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub test: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillPayload {
    pub teacher: TeacherSummary,
    pub transfer: TransferSummary,
    pub student: StudentSummary,
    pub nature: NatureScore,
    /// Absent when some class has fewer than two transfer examples.
    pub variance: Option<ResponseVarianceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherScan {
    pub teacher: TeacherSummary,
    pub curve: EntropyCurve,
    pub nature: NatureScore,
    pub variance: Option<ResponseVarianceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyScanPayload {
    pub temperatures: Vec<f64>,
    pub examples: usize,
    pub reference_t: f64,
    pub teachers: Vec<TeacherScan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingClassCell {
    pub teacher: String,
    pub temperature: f64,
    /// Student accuracy on the removed class.
    pub missing_accuracy: f64,
    pub accuracy: f64,
    pub student_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingClassRow {
    pub teacher: String,
    /// One entry per grid temperature.
    pub missing_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingClassPayload {
    pub class: usize,
    pub temperatures: Vec<f64>,
    pub transfer_examples: usize,
    pub student_seed: u64,
    pub teachers: Vec<TeacherSummary>,
    /// Teachers down, temperatures across.
    pub table: Vec<MissingClassRow>,
    pub cells: Vec<MissingClassCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub per_class: usize,
    pub examples: usize,
    pub accuracy: f64,
    pub student_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSweep {
    pub teacher: TeacherSummary,
    pub points: Vec<SweepPoint>,
    /// Fewest examples per class whose student reached the target.
    pub required_per_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSweepPayload {
    pub policy: SelectionPolicy,
    pub t_sel: f64,
    pub temperature: f64,
    pub per_class: Vec<usize>,
    pub target_accuracy: Option<f64>,
    pub student_seed: u64,
    pub teachers: Vec<TeacherSweep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherProjection {
    pub teacher: TeacherSummary,
    pub cluster_spread: f64,
    pub orthonormality_error: f64,
    pub file: String,
    pub points: Vec<[f64; 2]>,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectPayload {
    pub classes: [usize; 3],
    pub per_class: usize,
    pub templates: TemplateSource,
    pub teachers: Vec<TeacherProjection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFile {
    pub batch: usize,
    pub epochs: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweetSpotPayload {
    /// The grid as run, with its derived base seed.
    pub grid: SweepGrid,
    pub surface: EntropySurface,
    pub trends: SurfaceTrends,
    pub floor: f64,
    pub ranked: Vec<Spot>,
    pub checkpoints: Vec<CellFile>,
}

/// Human-readable steps, printed by `--dry-run`.
pub fn plan(cfg: &ExperimentConfig) -> Vec<String> {
    let ds = &cfg.dataset;
    let mut steps = vec![format!(
        "load {} from {} (train limit {}, test limit {}, standardize {})",
        ds.id,
        ds.resolved_dir().display(),
        ds.train_limit.map_or("none".into(), |n| n.to_string()),
        ds.test_limit.map_or("none".into(), |n| n.to_string()),
        ds.standardize
    )];
    let teachers = |steps: &mut Vec<String>, list: &[NamedTeacher]| {
        for t in list {
            steps.push(match &t.source {
                TeacherSource::Checkpoint(p) => format!("load teacher {} from {}", t.name, p.display()),
                TeacherSource::Train { model, config } => format!(
                    "train teacher {} ({}, batch {}, {} epochs)",
                    t.name,
                    model.label(),
                    config.batch_size,
                    config.epochs
                ),
            });
        }
    };
    match &cfg.experiment {
        Experiment::TrainTeacher(x) => steps.push(format!(
            "train teacher {} ({}, batch {}, {} epochs) and evaluate on the test split",
            x.name,
            x.model.label(),
            x.train.batch_size,
            x.train.epochs
        )),
        Experiment::Distill(x) => {
            teachers(&mut steps, std::slice::from_ref(&x.teacher));
            steps.push(format!(
                "select transfer set ({:?}, {} per class, missing class {:?}), soft labels at T={}",
                x.transfer.policy,
                x.transfer.per_class.map_or("all".into(), |n| n.to_string()),
                x.transfer.missing_class,
                x.distill.temperature
            ));
            steps.push(format!(
                "distill student {} (alpha_kd {}, {} epochs) and evaluate",
                x.student.label(),
                x.distill.alpha_kd,
                x.distill.student.epochs
            ));
        }
        Experiment::EntropyScan(x) => {
            teachers(&mut steps, &x.teachers);
            steps.push(format!("entropy of soft labels at T in {:?}", x.temperatures));
        }
        Experiment::MissingClass(x) => {
            teachers(&mut steps, &x.teachers);
            steps.push(format!(
                "remove class {}; distill {} student(s) of {} over T in {:?}",
                x.class,
                x.teachers.len() * x.temperatures.len(),
                x.student.label(),
                x.temperatures
            ));
        }
        Experiment::TransferSweep(x) => {
            teachers(&mut steps, &x.teachers);
            steps.push(format!(
                "distill {} student(s) of {} at {:?} examples per class ({:?})",
                x.teachers.len() * x.per_class.len(),
                x.student.label(),
                x.per_class,
                x.policy
            ));
        }
        Experiment::Project(x) => {
            teachers(&mut steps, &x.teachers);
            steps.push(format!(
                "project {} examples of classes {} onto the template plane",
                x.per_class,
                x.classes.map_or("drawn from the seed".into(), |c| format!("{c:?}"))
            ));
        }
        Experiment::SweetSpot(x) => {
            steps.push(format!(
                "train {} teacher(s) of {} over batch sizes {:?} x epochs {:?}",
                x.grid.batch_sizes.len() * x.grid.epoch_counts.len(),
                x.model.label(),
                x.grid.batch_sizes,
                x.grid.epoch_counts
            ));
            steps.push(format!("rank sweet spots ({} refinement round(s))", x.refine.iterations));
        }
    }
    steps.push("write record.json and manifest.json".into());
    steps
}

/// Validates `cfg`, runs it (unless dry) and writes artifacts, the record
/// and the manifest under `opts.out`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let steps = plan(cfg);
    if opts.dry_run {
        return Ok(RunOutcome {
            plan: steps,
            record: None,
            manifest: None,
        });
    }
    let started_at = timestamp();
    let data = load_data(cfg)?;
    let mut out = OutputDir::create(&opts.out)?;
    let mut ctx = Ctx {
        cfg,
        data: &data,
        out: &mut out,
        verbose: opts.verbose,
    };
    let payload = match &cfg.experiment {
        Experiment::TrainTeacher(x) => {
            let named = NamedTeacher {
                name: x.name.clone(),
                source: TeacherSource::Train {
                    model: x.model.clone(),
                    config: x.train,
                },
            };
            let teacher = ctx.teachers(std::slice::from_ref(&named))?.remove(0);
            let test = evaluate(&teacher.checkpoint.model, &data.test)?;
            to_value(TrainTeacherPayload {
                teacher: teacher.summary,
                test,
                data_stats: data.stats.clone(),
            })
        }
        Experiment::Distill(x) => to_value(run_distill(&mut ctx, x)?),
        Experiment::EntropyScan(x) => to_value(run_entropy_scan(&mut ctx, x)?),
        Experiment::MissingClass(x) => to_value(run_missing_class(&mut ctx, x)?),
        Experiment::TransferSweep(x) => to_value(run_transfer_sweep(&mut ctx, x)?),
        Experiment::Project(x) => to_value(run_project(&mut ctx, x)?),
        Experiment::SweetSpot(x) => to_value(run_sweet_spot(&mut ctx, x)?),
    };
    let record = MetricsRecord {
        experiment: cfg.experiment.kind().into(),
        config_hash: cfg.hash(),
        tool: ToolInfo::current(),
        started_at,
        finished_at: timestamp(),
        config: cfg.resolved(),
        payload,
    };
    out.write_json(RECORD_FILE, &record)?;
    let manifest = out.finish()?;
    Ok(RunOutcome {
        plan: steps,
        record: Some(record),
        manifest: Some(manifest),
    })
}

fn to_value<T: Serialize>(payload: T) -> serde_json::Value {
    serde_json::to_value(payload).expect("payload serializes")
}

fn run_distill(ctx: &mut Ctx, x: &crate::config::DistillExperiment) -> Result<DistillPayload> {
    let teacher = ctx.teachers(std::slice::from_ref(&x.teacher))?.remove(0);
    let spec = x.student.resolve()?;
    let train = match x.transfer.missing_class {
        Some(k) => remove_class(&ctx.data.train, k)?,
        None => ctx.data.train.clone(),
    };
    let ts = match x.transfer.per_class {
        None => TransferSet::all(&train),
        Some(n) => select_transfer_set(
            &train,
            n,
            x.transfer.policy,
            Some(&teacher.checkpoint.model),
            x.transfer.t_sel,
            &mut SeededRng::new(ctx.cfg.component_seed(streams::SELECTION, 0, 0)),
        )?,
    };
    let dcfg = ctx.student_config(&x.distill, x.distill.temperature);
    let soft = generate_soft_labels(&teacher.checkpoint, &train, &ts, dcfg.temperature)?;
    ctx.log(format!("distilling {} on {} transfer examples", x.student.label(), ts.len()));
    let (mut student, history) = distill_student(&spec, &train, &ts, &soft, &dcfg)?;
    let test = evaluate(&student.model, &ctx.data.test)?;
    student.test_accuracy = Some(test.accuracy);
    ctx.save_checkpoint("students/student.kdlb", &student)?;
    ctx.out.write("soft_labels.csv", soft.to_csv().as_bytes())?;
    Ok(DistillPayload {
        teacher: teacher.summary,
        transfer: TransferSummary {
            policy: x.transfer.policy,
            per_class: x.transfer.per_class,
            t_sel: x.transfer.t_sel,
            missing_class: x.transfer.missing_class,
            examples: ts.len(),
        },
        student: StudentSummary {
            checkpoint_id: student.id(),
            file: "students/student.kdlb".into(),
            seed: dcfg.student.seed,
            history,
            test,
        },
        nature: classify_nature(&soft, DEFAULT_NATURE_THRESHOLD)?,
        variance: variance_in_response(&soft).ok(),
    })
}

fn run_entropy_scan(ctx: &mut Ctx, x: &crate::config::EntropyScanExperiment) -> Result<EntropyScanPayload> {
    let teachers = ctx.teachers(&x.teachers)?;
    let n = x.examples.unwrap_or(ctx.data.train.len()).min(ctx.data.train.len());
    let idx: Vec<usize> = (0..n).collect();
    let probe = ctx.data.train.subset(&idx);
    let ts = TransferSet::all(&probe);
    let mut scans = Vec::with_capacity(teachers.len());
    for t in teachers {
        ctx.log(format!("entropy scan of teacher {}", t.summary.name));
        let curve = entropy_curve(&t.checkpoint.model, &probe, &x.temperatures)?;
        let soft = generate_soft_labels(&t.checkpoint, &probe, &ts, x.reference_t)?;
        scans.push(TeacherScan {
            teacher: t.summary,
            curve,
            nature: classify_nature(&soft, x.nature_threshold)?,
            variance: variance_in_response(&soft).ok(),
        });
    }
    Ok(EntropyScanPayload {
        temperatures: x.temperatures.clone(),
        examples: n,
        reference_t: x.reference_t,
        teachers: scans,
    })
}

fn run_missing_class(ctx: &mut Ctx, x: &crate::config::MissingClassExperiment) -> Result<MissingClassPayload> {
    if ctx.data.test.class_counts()[x.class] == 0 {
        return Err(CliError::Data(format!("the test split has no examples of class {}", x.class)));
    }
    let teachers = ctx.teachers(&x.teachers)?;
    let spec = x.student.resolve()?;
    let removed = remove_class(&ctx.data.train, x.class)?;
    let ts = TransferSet::all(&removed);
    if ts.indices.iter().any(|&i| removed.labels[i] == x.class) {
        return Err(CliError::Runtime(format!("class {} leaked into the transfer set", x.class)));
    }
    let mut cells = Vec::new();
    let mut table = Vec::new();
    let mut student_seed = 0;
    for t in &teachers {
        let mut row = Vec::with_capacity(x.temperatures.len());
        for &temp in &x.temperatures {
            let dcfg = ctx.student_config(&x.distill, temp);
            student_seed = dcfg.student.seed;
            ctx.log(format!("missing class {}: teacher {}, T={temp}", x.class, t.summary.name));
            let soft = generate_soft_labels(&t.checkpoint, &removed, &ts, temp)?;
            let (student, _) = distill_student(&spec, &removed, &ts, &soft, &dcfg)?;
            let eval = evaluate(&student.model, &ctx.data.test)?;
            let missing = eval.per_class[x.class].expect("class present in the test split");
            ctx.log(format!("  accuracy on class {}: {missing:.4} (overall {:.4})", x.class, eval.accuracy));
            row.push(missing);
            cells.push(MissingClassCell {
                teacher: t.summary.name.clone(),
                temperature: temp,
                missing_accuracy: missing,
                accuracy: eval.accuracy,
                student_id: student.id(),
            });
        }
        table.push(MissingClassRow {
            teacher: t.summary.name.clone(),
            missing_accuracy: row,
        });
    }
    Ok(MissingClassPayload {
        class: x.class,
        temperatures: x.temperatures.clone(),
        transfer_examples: ts.len(),
        student_seed,
        teachers: teachers.into_iter().map(|t| t.summary).collect(),
        table,
        cells,
    })
}

fn run_transfer_sweep(ctx: &mut Ctx, x: &crate::config::TransferSweepExperiment) -> Result<TransferSweepPayload> {
    let teachers = ctx.teachers(&x.teachers)?;
    let spec = x.student.resolve()?;
    let dcfg = ctx.student_config(&x.distill, x.distill.temperature);
    let mut sweeps = Vec::with_capacity(teachers.len());
    for t in teachers {
        let mut points = Vec::with_capacity(x.per_class.len());
        for (pi, &n) in x.per_class.iter().enumerate() {
            // Same seed for every teacher, so random selections coincide.
            let mut rng = SeededRng::new(ctx.cfg.component_seed(streams::SELECTION, pi, 0));
            let ts = select_transfer_set(&ctx.data.train, n, x.policy, Some(&t.checkpoint.model), x.t_sel, &mut rng)?;
            let soft = generate_soft_labels(&t.checkpoint, &ctx.data.train, &ts, dcfg.temperature)?;
            let (student, _) = distill_student(&spec, &ctx.data.train, &ts, &soft, &dcfg)?;
            let accuracy = evaluate(&student.model, &ctx.data.test)?.accuracy;
            ctx.log(format!("transfer sweep: teacher {}, {n} per class: {accuracy:.4}", t.summary.name));
            points.push(SweepPoint {
                per_class: n,
                examples: ts.len(),
                accuracy,
                student_id: student.id(),
            });
        }
        let required_per_class = x
            .target_accuracy
            .and_then(|target| points.iter().find(|p| p.accuracy >= target).map(|p| p.per_class));
        sweeps.push(TeacherSweep {
            teacher: t.summary,
            points,
            required_per_class,
        });
    }
    Ok(TransferSweepPayload {
        policy: x.policy,
        t_sel: x.t_sel,
        temperature: dcfg.temperature,
        per_class: x.per_class.clone(),
        target_accuracy: x.target_accuracy,
        student_seed: dcfg.student.seed,
        teachers: sweeps,
    })
}

fn run_project(ctx: &mut Ctx, x: &crate::config::ProjectExperiment) -> Result<ProjectPayload> {
    let teachers = ctx.teachers(&x.teachers)?;
    let classes = x.classes.unwrap_or_else(|| {
        let mut all: Vec<usize> = (0..ctx.data.test.classes).collect();
        SeededRng::new(ctx.cfg.component_seed(streams::PROJECTION, 0, 0)).shuffle(&mut all);
        [all[0], all[1], all[2]]
    });
    let mut out = Vec::with_capacity(teachers.len());
    for t in teachers {
        // Same examples for every teacher.
        let mut rng = SeededRng::new(ctx.cfg.component_seed(streams::PROJECTION, 1, 0));
        let pr = penultimate_projection(&t.checkpoint.model, &ctx.data.test, classes, x.per_class, x.templates, &mut rng)?;
        let spread = cluster_spread(&pr)?;
        ctx.log(format!("projection of teacher {}: cluster spread {spread:.4}", t.summary.name));
        let file = format!("projection_{}.csv", t.summary.name);
        ctx.out.write(&file, pr.to_csv().as_bytes())?;
        out.push(TeacherProjection {
            teacher: t.summary,
            cluster_spread: spread,
            orthonormality_error: pr.orthonormality_error(),
            file,
            points: pr.points,
            classes: pr.classes,
        });
    }
    Ok(ProjectPayload {
        classes,
        per_class: x.per_class,
        templates: x.templates,
        teachers: out,
    })
}

pub fn cell_file(batch: usize, epochs: usize) -> String {
    format!("checkpoints/b{batch}_e{epochs}.kdlb")
}

fn run_sweet_spot(ctx: &mut Ctx, x: &crate::config::SweetSpotExperiment) -> Result<SweetSpotPayload> {
    let spec = x.model.resolve()?;
    let mut grid = x.grid.clone();
    grid.base.seed = ctx.cfg.component_seed(streams::SWEEP, 0, x.grid.base.seed);
    let data = ctx.data;
    let verbose = ctx.verbose;
    let mut files = Vec::new();
    let mut write_error = None;
    let out = &mut *ctx.out;
    let mut surface = entropy_surface_with(&spec, &data.train, &data.test, &grid, |cell, ckpt| {
        if verbose {
            eprintln!("[kdlab] sweep cell batch {} epochs {}: {:?}", cell.batch, cell.epochs, cell.outcome);
        }
        if let (true, Some(ckpt), None) = (x.save_checkpoints, ckpt, &write_error) {
            let file = cell_file(cell.batch, cell.epochs);
            match out.write(&file, &ckpt.to_bytes()) {
                Ok(_) => files.push(CellFile {
                    batch: cell.batch,
                    epochs: cell.epochs,
                    file,
                }),
                Err(e) => write_error = Some(e),
            }
        }
    })?;
    if let Some(e) = write_error {
        return Err(e);
    }
    let floor = accuracy_floor(&surface, grid.min_accuracy)?;
    let ranked = refine_sweet_spot(&mut surface, &spec, &data.train, &data.test, &grid, x.refine)?;
    ctx.out.write("surface.csv", surface.to_csv().as_bytes())?;
    ctx.out.write_json("sweet_spots.json", &serde_json::json!({ "floor": floor, "ranked": ranked }))?;
    Ok(SweetSpotPayload {
        trends: surface_trends(&surface),
        grid,
        surface,
        floor,
        ranked,
        checkpoints: files,
    })
}
