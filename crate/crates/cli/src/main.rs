mod compare;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use citseg::eval::{evaluate_cit, group_metrics};
use citseg::losses::LabelMode;
use citseg::model::ModelSnapshot;
use citseg::pipeline::{run_experiment, train_oracle, ExperimentConfig, PipelineMode, ResultsReport};
use citseg::schedule::{build_schedule, ScheduleDoc, TaskSchedule};
use citseg::synthdata::{export_png_pairs, DatasetManifest, DatasetSpec, DATASET_FORMAT_VERSION};
use clap::{Parser, Subcommand};
use serde::Serialize;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_SNAPSHOT: u8 = 4;
const EXIT_COMPARE: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self::new(EXIT_FAILURE, message)
    }
}

impl From<citseg::Error> for Failure {
    fn from(e: citseg::Error) -> Self {
        use citseg::Error::*;
        let code = match &e {
            Argument(_) | Schedule(_) => EXIT_CONFIG,
            NumericAbort { .. } => EXIT_NUMERIC,
            Snapshot(_) => EXIT_SNAPSHOT,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::other(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "citseg", version, about = "Continual semantic segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Export the synthetic benchmark with a manifest and digest.
    GenData {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Write only the manifest, not the PNG pairs.
        #[arg(long)]
        manifest_only: bool,
    },
    /// Run a full continual experiment.
    Train {
        config: PathBuf,
        #[arg(long)]
        mode: Option<PipelineMode>,
        #[arg(long)]
        labels: Option<LabelMode>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a saved snapshot on an exported dataset's test split.
    Eval {
        snapshot: PathBuf,
        dataset: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        include_background: bool,
    },
    /// Per-group deltas between two results files, plus a base-mIoU chart.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "base_miou.svg")]
        svg: PathBuf,
    },
    /// Joint training on every class as a reference ceiling.
    Oracle {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData {
            config,
            output_dir,
            force,
            manifest_only,
        } => gen_data(&config, output_dir, force, manifest_only),
        Command::Train {
            config,
            mode,
            labels,
            output_dir,
            force,
        } => train(&config, mode, labels, output_dir, force),
        Command::Eval {
            snapshot,
            dataset,
            tau,
            include_background,
        } => eval(&snapshot, &dataset, tau, include_background),
        Command::Compare { a, b, svg } => compare_runs(&a, &b, &svg),
        Command::Oracle {
            config,
            output_dir,
            force,
        } => oracle(&config, output_dir, force),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .map_err(|e| Failure::other(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, code: u8) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::new(code, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::new(code, format!("{}: {e}", path.display())))
}

fn prepared(path: &Path) -> Result<ExperimentConfig, Failure> {
    let cfg = config::load(path)?.resolved();
    cfg.validate()
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn gen_data(path: &Path, flag: Option<PathBuf>, force: bool, manifest_only: bool) -> Result<(), Failure> {
    let cfg = prepared(path)?;
    let dir = config::output_dir(&cfg, flag)?;
    config::claim_output(&dir, force)?;
    let spec = DatasetSpec {
        synth: cfg.synth.clone(),
        train_size: cfg.data.train_size,
        test_size: cfg.data.test_size,
    };
    let (train, test) = (spec.train(), spec.test());
    let digest = citseg::synthdata::dataset_digest(&[train.as_slice(), test.as_slice()].concat());
    if !manifest_only {
        export_png_pairs(&dir.join("train"), &train)?;
        export_png_pairs(&dir.join("test"), &test)?;
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        config: spec,
        digest,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    print_json(&manifest)
}

fn train(
    path: &Path,
    mode: Option<PipelineMode>,
    labels: Option<LabelMode>,
    flag: Option<PathBuf>,
    force: bool,
) -> Result<(), Failure> {
    let mut cfg = config::load(path)?;
    if let Some(m) = mode {
        cfg.train.pipeline_mode = m;
    }
    if let Some(l) = labels {
        cfg.train.label_mode = l;
    }
    let cfg = cfg.resolved();
    cfg.validate()
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let dir = config::output_dir(&cfg, flag)?;
    config::claim_output(&dir, force)?;
    let cfg = ExperimentConfig {
        output_dir: Some(dir),
        ..cfg
    };
    let report = run_experiment(&cfg)?;
    print_json(&serde_json::json!({
        "status": report.status,
        "dataset_digest": report.dataset_digest,
        "final": report.final_metrics(),
        "forgetting": report.forgetting,
    }))
}

fn eval(snapshot_dir: &Path, dataset_dir: &Path, tau: Option<f64>, include_background: bool) -> Result<(), Failure> {
    let snapshot = ModelSnapshot::load(snapshot_dir).map_err(|e| Failure::new(EXIT_SNAPSHOT, e.to_string()))?;
    let manifest: DatasetManifest = read_json(&dataset_dir.join("manifest.json"), EXIT_SNAPSHOT)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Failure::new(
            EXIT_SNAPSHOT,
            format!("dataset format_version {} is not supported", manifest.format_version),
        ));
    }
    if manifest.config.digest() != manifest.digest {
        return Err(Failure::new(
            EXIT_SNAPSHOT,
            "dataset digest does not match its manifest",
        ));
    }
    let doc: ScheduleDoc = snapshot
        .manifest()
        .hyperparams
        .get("schedule")
        .cloned()
        .ok_or_else(|| Failure::new(EXIT_SNAPSHOT, "snapshot manifest carries no schedule"))
        .and_then(|v| serde_json::from_value(v).map_err(|e| Failure::new(EXIT_SNAPSHOT, e.to_string())))?;
    let schedule = TaskSchedule::from_doc(&doc).map_err(|e| Failure::new(EXIT_SNAPSHOT, e.to_string()))?;
    let k = manifest.config.synth.num_classes;
    if schedule.total_classes != k {
        return Err(Failure::new(
            EXIT_SNAPSHOT,
            format!(
                "snapshot schedule covers {} classes, dataset has {k}",
                schedule.total_classes
            ),
        ));
    }
    let tau = tau.unwrap_or(0.5);
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Failure::config("tau must be in (0, 1)"));
    }
    let conf = evaluate_cit(snapshot.model(), &manifest.config.test(), k, tau)?;
    let metrics = group_metrics(&conf, &schedule, snapshot.task_index(), include_background)?;
    print_json(&metrics)
}

fn load_report(path: &Path) -> Result<ResultsReport, Failure> {
    let report: ResultsReport = read_json(path, EXIT_CONFIG)?;
    report
        .validate()
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    Ok(report)
}

fn compare_runs(a: &Path, b: &Path, svg: &Path) -> Result<(), Failure> {
    let (ra, rb) = (load_report(a)?, load_report(b)?);
    if ra.dataset_digest != rb.dataset_digest {
        return Err(Failure::new(EXIT_COMPARE, "dataset digests differ"));
    }
    if ra.schedule != rb.schedule {
        return Err(Failure::new(EXIT_COMPARE, "schedules differ"));
    }
    fs::write(svg, compare::base_curve_svg(&ra, &rb)).map_err(|e| Failure::other(format!("{}: {e}", svg.display())))?;
    print_json(&compare::compare(&ra, &rb))
}

fn oracle(path: &Path, flag: Option<PathBuf>, force: bool) -> Result<(), Failure> {
    let cfg = prepared(path)?;
    let dir = config::output_dir(&cfg, flag)?;
    config::claim_output(&dir, force)?;
    let schedule = cfg.task_schedule()?;
    let spec = DatasetSpec {
        synth: cfg.synth.clone(),
        train_size: cfg.data.train_size,
        test_size: cfg.data.test_size,
    };
    let (train, test) = (spec.train(), spec.test());
    let model = train_oracle(&cfg.train, &cfg.synth, &train)?;
    let conf = evaluate_cit(&model, &test, cfg.synth.num_classes, cfg.eval.tau)?;
    let last = schedule.num_tasks() - 1;
    let metrics = group_metrics(&conf, &schedule, last, cfg.eval.include_background)?;
    let k = cfg.synth.num_classes;
    let joint = build_schedule(k, k, 1, cfg.schedule.protocol)?;
    let snapshot = ModelSnapshot::capture(
        &model,
        0,
        joint.groups[0].class_ids.clone(),
        serde_json::json!({ "train": cfg.train, "schedule": joint.to_doc() }),
    )?;
    snapshot.save(&dir.join("snapshot"))?;
    let mut echo = cfg.clone();
    echo.output_dir = None;
    let out = serde_json::json!({
        "config": echo,
        "dataset_digest": citseg::synthdata::dataset_digest(&[train.as_slice(), test.as_slice()].concat()),
        "metrics": metrics,
    });
    write_json(&dir.join("oracle.json"), &out)?;
    print_json(&metrics)
}
