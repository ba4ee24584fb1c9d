use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{fit_cit, fit_softmax, train_task, RunState, TaskSummary, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_cit, evaluate_softmax, forgetting_curve, group_metrics, ForgettingCurve, GroupMetrics};
use crate::model::{cit_adapt, CitModel, Extractor, LinearHead, SoftmaxModel};
use crate::schedule::{build_schedule, filter_dataset, ClassId, Protocol, ScheduleDoc, SegSample, TaskSchedule};
use crate::synthdata::{dataset_digest, generate_dataset, generate_test_split, SynthConfig};

pub const RESULTS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_size: 2000,
            test_size: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    /// Defaults to `synth.num_classes`.
    pub total: Option<usize>,
    pub init: usize,
    pub incr: usize,
    pub protocol: Protocol,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total: None,
            init: 4,
            incr: 2,
            protocol: Protocol::Overlap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub tau: f64,
    pub include_background: bool,
    /// Also train a joint model on every class as a reference ceiling.
    pub oracle: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            include_background: false,
            oracle: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Fills derived defaults and synchronises redundant fields.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.schedule.total.get_or_insert(out.synth.num_classes);
        out.train = out.train.resolved();
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.data.train_size == 0 || self.data.test_size == 0 {
            return Err(Error::Argument("train_size and test_size must be positive".into()));
        }
        let total = self.schedule.total.unwrap_or(self.synth.num_classes);
        if total != self.synth.num_classes {
            return Err(Error::Argument(format!(
                "schedule covers {total} classes but the benchmark has {}",
                self.synth.num_classes
            )));
        }
        if !(self.eval.tau > 0.0 && self.eval.tau < 1.0) {
            return Err(Error::Argument("eval.tau must be in (0, 1)".into()));
        }
        self.task_schedule().map(|_| ())
    }

    pub fn task_schedule(&self) -> Result<TaskSchedule> {
        build_schedule(
            self.schedule.total.unwrap_or(self.synth.num_classes),
            self.schedule.init,
            self.schedule.incr,
            self.schedule.protocol,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPolicy {
    pub undefined_iou: String,
    pub include_background: bool,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub metrics: GroupMetrics,
    pub training: TaskSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub task_index: usize,
    pub owned_class_ids: Vec<ClassId>,
    pub param_digest: String,
    pub probe_digest: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_secs: f64,
    pub per_task_secs: Vec<f64>,
    pub oracle_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsReport {
    pub format_version: u32,
    pub status: RunStatus,
    pub error: Option<String>,
    pub config: ExperimentConfig,
    pub schedule: ScheduleDoc,
    pub dataset_digest: String,
    pub metric_policy: MetricPolicy,
    pub tasks: Vec<TaskReport>,
    pub forgetting: Option<ForgettingCurve>,
    pub oracle: Option<GroupMetrics>,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Wall-clock measurements; the only run-dependent field.
    pub timing: Timing,
}

impl ResultsReport {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != RESULTS_FORMAT_VERSION {
            return Err(Error::Argument(format!(
                "results format_version {} is not supported",
                self.format_version
            )));
        }
        if self.tasks.iter().enumerate().any(|(i, t)| t.metrics.task_index != i) {
            return Err(Error::Argument("task blocks out of order".into()));
        }
        if self.status == RunStatus::Complete && self.tasks.len() != self.schedule.groups.len() {
            return Err(Error::Argument("complete report misses task blocks".into()));
        }
        Ok(())
    }

    /// JSON with the timing block removed.
    pub fn without_timing(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("timing");
        }
        Ok(serde_json::to_string_pretty(&value)?)
    }

    pub fn final_metrics(&self) -> Option<&GroupMetrics> {
        self.tasks.last().map(|t| &t.metrics)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// `task_index,base_miou,new_miou,all_miou`, empty cells for undefined values.
pub fn curve_csv(tasks: &[TaskReport]) -> String {
    let mut out = String::from("task_index,base_miou,new_miou,all_miou\n");
    for t in tasks {
        let m = &t.metrics;
        out.push_str(&format!(
            "{},{},{},{}\n",
            m.task_index,
            fmt_opt(m.base),
            fmt_opt(m.new),
            fmt_opt(m.all)
        ));
    }
    out
}

struct Artifacts {
    root: PathBuf,
}

impl Artifacts {
    fn create(root: &Path) -> Result<Self> {
        for sub in ["registry", "logs", "curves"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    fn log_file(&self, t: usize) -> Result<BufWriter<fs::File>> {
        let p = self.root.join("logs").join(format!("train_{t}.jsonl"));
        Ok(BufWriter::new(fs::File::create(&p).map_err(|e| Error::io(&p, e))?))
    }

    fn write_report(&self, report: &ResultsReport) -> Result<()> {
        report.validate()?;
        write_json(&self.root.join("results.json"), report)?;
        let p = self.root.join("curves").join("miou.csv");
        fs::write(&p, curve_csv(&report.tasks)).map_err(|e| Error::io(&p, e))
    }
}

/// Generates the benchmark, runs every task, evaluates after each one on the
/// full test split and, when `output_dir` is set, writes all artifacts there.
/// On failure the report written so far is kept with status `failed`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultsReport> {
    let config = config.resolved();
    config.validate()?;
    let artifacts = config.output_dir.as_deref().map(Artifacts::create).transpose()?;
    if let Some(a) = &artifacts {
        write_json(&a.root.join("config.json"), &config)?;
    }

    let schedule = config.task_schedule()?;
    let train = generate_dataset(&config.synth, config.data.train_size);
    let test = generate_test_split(&config.synth, config.data.test_size);
    let digest = dataset_digest(&[train.as_slice(), test.as_slice()].concat());

    let mut echo = config.clone();
    echo.output_dir = None;
    let mut report = ResultsReport {
        format_version: RESULTS_FORMAT_VERSION,
        status: RunStatus::Failed,
        error: None,
        config: echo,
        schedule: schedule.to_doc(),
        dataset_digest: digest,
        metric_policy: MetricPolicy {
            undefined_iou: "skipped".into(),
            include_background: config.eval.include_background,
            tau: config.eval.tau,
        },
        tasks: Vec::new(),
        forgetting: None,
        oracle: None,
        checkpoints: Vec::new(),
        timing: Timing::default(),
    };

    let started = Instant::now();
    let outcome = run_tasks(&config, &schedule, &train, &test, &mut report, artifacts.as_ref());
    report.timing.total_secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(()) => {
            report.status = RunStatus::Complete;
            if let Some(a) = &artifacts {
                a.write_report(&report)?;
            }
            Ok(report)
        }
        Err(e) => {
            report.error = Some(e.to_string());
            if let Some(a) = &artifacts {
                if let Err(write_err) = a.write_report(&report) {
                    log::error!("could not write partial results: {write_err}");
                }
            }
            Err(e)
        }
    }
}

fn run_tasks(
    config: &ExperimentConfig,
    schedule: &TaskSchedule,
    train: &[SegSample],
    test: &[SegSample],
    report: &mut ResultsReport,
    artifacts: Option<&Artifacts>,
) -> Result<()> {
    let cfg = &config.train;
    let k = config.synth.num_classes;
    let mut state = RunState::new(cfg, schedule)?;
    for t in 0..schedule.num_tasks() {
        let task_started = Instant::now();
        let dataset = filter_dataset(train, schedule, t)?;
        let mut log_file = artifacts.map(|a| a.log_file(t)).transpose()?;
        let summary = train_task(
            &mut state,
            schedule,
            t,
            &dataset,
            cfg,
            log_file.as_mut().map(|w| w as &mut dyn std::io::Write),
        );
        if let Some(mut w) = log_file {
            std::io::Write::flush(&mut w).map_err(|e| Error::io("<train log>", e))?;
        }
        let summary = summary?;

        let snapshot = state.registry.get(t)?;
        if let Some(a) = artifacts {
            snapshot.save(&a.root.join("registry").join(format!("task_{t}")))?;
        }
        report.checkpoints.push(CheckpointRecord {
            task_index: t,
            owned_class_ids: snapshot.owned_class_ids().to_vec(),
            param_digest: snapshot.param_digest(),
            probe_digest: snapshot.manifest().probe_digest.clone(),
        });

        let conf = evaluate_cit(&state.model, test, k, config.eval.tau)?;
        let metrics = group_metrics(&conf, schedule, t, config.eval.include_background)?;
        log::info!(
            "task {t}: base {:?} new {:?} all {:?}",
            metrics.base,
            metrics.new,
            metrics.all
        );
        state.history.push(metrics.clone());
        report.tasks.push(TaskReport {
            metrics,
            training: summary,
        });
        report.timing.per_task_secs.push(task_started.elapsed().as_secs_f64());
        if let Some(a) = artifacts {
            a.write_report(report)?;
        }
    }

    for (record, snap) in report.checkpoints.iter().zip(state.registry.entries()) {
        if record.param_digest != snap.param_digest() {
            return Err(Error::Registry(format!(
                "snapshot {} changed after registration",
                record.task_index
            )));
        }
    }
    report.forgetting = Some(forgetting_curve(&state.history)?);

    if config.eval.oracle {
        let started = Instant::now();
        let oracle = train_oracle(cfg, &config.synth, train)?;
        let joint = build_schedule(k, k, 1, schedule.protocol)?;
        let conf = evaluate_cit(&oracle, test, k, config.eval.tau)?;
        let mut metrics = group_metrics(&conf, &joint, 0, config.eval.include_background)?;
        metrics.task_index = schedule.num_tasks() - 1;
        report.oracle = Some(metrics);
        report.timing.oracle_secs = Some(started.elapsed().as_secs_f64());
    }
    Ok(())
}

/// Joint training of the class-independent model on every class at once,
/// with the budget of the first task.
pub fn train_oracle(cfg: &TrainConfig, synth: &SynthConfig, train: &[SegSample]) -> Result<CitModel> {
    let ids: Vec<ClassId> = (1..=synth.num_classes as ClassId).collect();
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    let mut model = CitModel::new(&cfg.model, ids.clone(), &mut rng)?;
    fit_cit(
        &mut model,
        train,
        &ids,
        None,
        cfg.steps_per_task,
        0,
        cfg,
        &mut rng,
        None,
    )?;
    Ok(model)
}

/// Outcome of training the softmax head and the adapted class-independent
/// head from the same initialisation and budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadComparison {
    pub seed: u64,
    pub softmax_miou: Option<f64>,
    pub cit_miou: Option<f64>,
    pub softmax_params: usize,
    pub cit_params: usize,
}

/// Joint training on all classes with either head, identical initial weights,
/// sample order and step count.
pub fn compare_heads(
    cfg: &TrainConfig,
    synth: &SynthConfig,
    train: &[SegSample],
    test: &[SegSample],
    tau: f64,
) -> Result<HeadComparison> {
    use crate::model::Parameters;

    let k = synth.num_classes;
    let mut init_rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    let softmax_init = SoftmaxModel::new(&cfg.model.extractor, k, &mut init_rng);
    let all: Vec<ClassId> = (1..=k as ClassId).collect();

    let mut softmax = softmax_init.clone();
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed ^ 0x5A5A);
    fit_softmax(&mut softmax, train, cfg.steps_per_task, cfg, &mut rng)?;
    let softmax_conf = evaluate_softmax(&softmax, test, k)?;

    let mut cit = adapted_model(&softmax_init.extractor, &softmax_init.head);
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed ^ 0x5A5A);
    fit_cit(&mut cit, train, &all, None, cfg.steps_per_task, 0, cfg, &mut rng, None)?;
    let cit_conf = evaluate_cit(&cit, test, k, tau)?;

    Ok(HeadComparison {
        seed: cfg.seed,
        softmax_miou: softmax_conf.miou(&all)?,
        cit_miou: cit_conf.miou(&all)?,
        softmax_params: softmax.num_params(),
        cit_params: cit.num_params(),
    })
}

pub fn adapted_model(extractor: &Extractor, head: &LinearHead) -> CitModel {
    CitModel {
        extractor: extractor.clone(),
        bank: cit_adapt(head),
    }
}
