use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kdlab::config::{DatasetConfig, Experiment, ExperimentConfig};
use kdlab::experiments::{load_data, run_experiment, RunOptions};
use kdlab::export::{export, Target};
use kdlab::fetch::{self, FetchOptions, Source};
use kdlab::record::{MetricsRecord, OutputDir};
use kdlab::{CliError, Result};
use kdlab_core::nn::presets::Dataset;
use kdlab_core::train::{evaluate, Checkpoint};

/// Knowledge-distillation lab: train teachers, distill students, and
/// measure how much similarity information soft labels carry.
///
/// Exit codes: 0 success, 1 config or usage error, 2 data error,
/// 3 runtime error or divergence.
#[derive(Debug, Parser)]
#[command(name = "kdlab", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Validate and print the plan without doing the work.
    #[arg(long, global = true)]
    dry_run: bool,
    /// No progress lines on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Download a dataset and verify its pinned SHA-256 digests.
    Fetch {
        /// mnist, fashion-mnist or cifar10.
        id: String,
        /// Base URL replacing the upstream location.
        #[arg(long)]
        mirror: Option<String>,
        #[arg(long, default_value_t = 3)]
        retries: u32,
    },
    /// Train one teacher and evaluate it.
    TrainTeacher,
    /// Distill a student from a teacher.
    Distill,
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset id; taken from --config when omitted.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Soft-label entropy of teachers across temperatures.
    EntropyScan,
    /// Students distilled without one class, scored on that class.
    MissingClass,
    /// Student accuracy against transfer-set size.
    TransferSweep,
    /// Penultimate-layer projections onto class-template planes.
    Project,
    /// Batch-size × epoch sweep of teacher training.
    SweetSpot,
    /// Turn run records into plot-data CSV.
    Export {
        /// fig3, fig4, fig6, fig8, table4-6 or projection.
        #[arg(long)]
        target: String,
        /// Run directories or record.json files.
        #[arg(required = true)]
        records: Vec<PathBuf>,
    },
}

impl Command {
    fn experiment_kind(&self) -> Option<&'static str> {
        Some(match self {
            Command::TrainTeacher => "train-teacher",
            Command::Distill => "distill",
            Command::EntropyScan => "entropy-scan",
            Command::MissingClass => "missing-class",
            Command::TransferSweep => "transfer-sweep",
            Command::Project => "project",
            Command::SweetSpot => "sweet-spot",
            Command::Fetch { .. } | Command::Eval { .. } | Command::Export { .. } => return None,
        })
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <path> is required for this subcommand".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run_kind(kind: &str, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    if cfg.experiment.kind() != kind {
        return Err(CliError::Config(format!(
            "config describes a {} experiment, not {kind}",
            cfg.experiment.kind()
        )));
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{kind}-{}", &cfg.hash()[..12])));
    let opts = RunOptions {
        out: out.clone(),
        dry_run: common.dry_run,
        verbose: !common.quiet,
    };
    let outcome = run_experiment(&cfg, &opts)?;
    if common.dry_run {
        println!("config ok ({} experiment, hash {})", kind, cfg.hash());
        for (i, step) in outcome.plan.iter().enumerate() {
            println!("{:>2}. {step}", i + 1);
        }
        println!("output directory: {}", out.display());
        return Ok(());
    }
    let manifest = outcome.manifest.expect("manifest of a real run");
    println!("wrote {} file(s) to {}", manifest.files.len() + 1, out.display());
    Ok(())
}

fn run_fetch(id: &str, mirror: Option<&str>, retries: u32, common: &Common) -> Result<()> {
    let mut source = Source::by_id(id)?;
    if let Some(m) = mirror {
        source = source.with_mirror(m);
    }
    let dataset: Dataset = id.parse().map_err(CliError::Config)?;
    let dir = common.out.clone().unwrap_or_else(|| {
        DatasetConfig {
            id: dataset,
            dir: None,
            train_limit: None,
            test_limit: None,
            standardize: false,
        }
        .resolved_dir()
    });
    if common.dry_run {
        for line in fetch::plan(&source, &dir) {
            println!("{line}");
        }
        return Ok(());
    }
    let report = fetch::fetch_dataset(
        &source,
        &dir,
        &FetchOptions {
            retries,
            ..FetchOptions::default()
        },
    )?;
    println!(
        "{}: {} downloaded, {} already verified, {} unpacked in {}",
        source.id,
        report.downloaded.len(),
        report.verified.len(),
        report.unpacked.len(),
        dir.display()
    );
    Ok(())
}

fn run_eval(checkpoint: &Path, dataset: Option<&str>, data_dir: Option<&Path>, common: &Common) -> Result<()> {
    let mut cfg = match (&common.config, dataset) {
        (Some(_), _) => load_config(common)?,
        (None, Some(id)) => ExperimentConfig {
            seed: common.seed.unwrap_or(0),
            output_dir: None,
            dataset: DatasetConfig {
                id: id.parse().map_err(CliError::Config)?,
                dir: None,
                train_limit: None,
                test_limit: None,
                standardize: false,
            },
            // Only the dataset section matters for evaluation.
            experiment: Experiment::Project(kdlab::config::ProjectExperiment {
                teachers: Vec::new(),
                classes: None,
                per_class: 2,
                templates: Default::default(),
            }),
        },
        (None, None) => return Err(CliError::Config("eval needs --dataset <id> or --config <path>".into())),
    };
    if let Some(d) = data_dir {
        cfg.dataset.dir = Some(d.to_path_buf());
    }
    if common.dry_run {
        println!(
            "evaluate {} on the {} test split in {}",
            checkpoint.display(),
            cfg.dataset.id,
            cfg.dataset.resolved_dir().display()
        );
        return Ok(());
    }
    let ckpt = Checkpoint::load(checkpoint).map_err(|e| CliError::from(e).context(checkpoint.display()))?;
    let data = load_data(&cfg)?;
    let eval = evaluate(&ckpt.model, &data.test)?;
    let report = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "checkpoint_id": ckpt.id(),
        "dataset": cfg.dataset.id,
        "evaluation": eval,
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    if let Some(out) = &common.out {
        let mut dir = OutputDir::create(out)?;
        dir.write_json("eval.json", &report)?;
        dir.finish()?;
    }
    Ok(())
}

fn run_export(target: &str, records: &[PathBuf], common: &Common) -> Result<()> {
    let target: Target = target.parse().map_err(CliError::Config)?;
    let loaded = records.iter().map(|p| MetricsRecord::load(p)).collect::<Result<Vec<_>>>()?;
    let table = export(&loaded, target)?;
    let file = format!("{target}.csv");
    if common.dry_run {
        println!("would write {} row(s) to {file}", table.rows.len());
        return Ok(());
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let mut dir = OutputDir::create(&out)?;
    let path = dir.write(&file, table.to_csv().as_bytes())?;
    dir.finish()?;
    println!("wrote {} row(s) to {}", table.rows.len(), path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    if let Some(kind) = cli.command.experiment_kind() {
        return run_kind(kind, common);
    }
    match &cli.command {
        Command::Fetch { id, mirror, retries } => run_fetch(id, mirror.as_deref(), *retries, common),
        Command::Eval {
            checkpoint,
            dataset,
            data_dir,
        } => run_eval(checkpoint, dataset.as_deref(), data_dir.as_deref(), common),
        Command::Export { target, records } => run_export(target, records, common),
        _ => unreachable!("experiment subcommands handled above"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
