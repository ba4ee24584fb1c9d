use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::registry::{CheckpointRegistry, PipelineMode, TeacherPlan};
use crate::error::{Error, Result};
use crate::eval::GroupMetrics;
use crate::losses::{total_loss, DistillConfig, LabelMode, LogitGrad, LossReport, RoutingTable};
use crate::model::{zeros_like, CitModel, ModelConfig, ModelSnapshot, Parameters, QueryInit, SoftmaxModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::schedule::{ClassId, SegSample, TaskDataset, TaskSchedule};
use crate::synthdata::hflip;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub pipeline_mode: PipelineMode,
    /// Overrides `distill.mode`.
    pub label_mode: LabelMode,
    pub steps_per_task: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Incremental tasks run `round(steps_per_task * incremental_factor)` steps.
    pub incremental_factor: f64,
    /// Learning rate multiplier for incremental tasks.
    pub incremental_lr_factor: f64,
    pub augment_flip: bool,
    pub distill: DistillConfig,
    pub optimizer: AdamWConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pipeline_mode: PipelineMode::Accumulative,
            label_mode: LabelMode::Soft,
            steps_per_task: 600,
            batch_size: 8,
            learning_rate: 5e-3,
            seed: 0,
            incremental_factor: 0.5,
            incremental_lr_factor: 0.3,
            augment_flip: true,
            distill: DistillConfig::default(),
            optimizer: AdamWConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_task == 0 || self.batch_size == 0 {
            return Err(Error::Argument("steps_per_task and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument("learning_rate must be positive".into()));
        }
        if !(self.incremental_factor > 0.0 && self.incremental_factor <= 1.0) {
            return Err(Error::Argument("incremental_factor must be in (0, 1]".into()));
        }
        if !(self.incremental_lr_factor > 0.0 && self.incremental_lr_factor <= 1.0) {
            return Err(Error::Argument("incremental_lr_factor must be in (0, 1]".into()));
        }
        if self.model.decoder.num_layers == 0 || self.model.extractor.blocks.is_empty() {
            return Err(Error::Argument(
                "model needs at least one block and one decoder layer".into(),
            ));
        }
        self.distill.validate()
    }

    /// Copy with `distill.mode` synchronised to `label_mode`.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.distill.mode = out.label_mode;
        out
    }

    pub fn steps_for_task(&self, t: usize) -> usize {
        if t == 0 {
            self.steps_per_task
        } else {
            ((self.steps_per_task as f64 * self.incremental_factor).round() as usize).max(1)
        }
    }

    /// Polynomial decay within a task.
    pub fn learning_rate_at(&self, task: usize, step: usize, steps: usize) -> f64 {
        let base = if task == 0 {
            self.learning_rate
        } else {
            self.learning_rate * self.incremental_lr_factor
        };
        base * (1.0 - step as f64 / steps as f64).powf(0.9)
    }
}

/// Mutable state of a continual run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub model: CitModel,
    pub registry: CheckpointRegistry,
    pub history: Vec<GroupMetrics>,
    pub rng: ChaCha8Rng,
}

impl RunState {
    /// Fresh model with one query per class of task 0.
    pub fn new(cfg: &TrainConfig, schedule: &TaskSchedule) -> Result<Self> {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
        let model = CitModel::new(&cfg.model, schedule.group(0)?.class_ids.clone(), &mut rng)?;
        Ok(Self {
            model,
            registry: CheckpointRegistry::new(),
            history: Vec::new(),
            rng,
        })
    }

    pub fn tasks_completed(&self) -> usize {
        self.registry.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_index: usize,
    pub steps: usize,
    pub train_samples: usize,
    /// Mean objective over the last tenth of the steps.
    pub final_loss: Option<f64>,
}

#[derive(Serialize)]
struct StepRecord<'a> {
    task: usize,
    step: usize,
    lr: f64,
    total: f64,
    supervised_term: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    distill_class_term: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    distill_mask_term: Option<f64>,
    per_class: &'a std::collections::BTreeMap<ClassId, f64>,
}

impl<'a> StepRecord<'a> {
    fn new(task: usize, step: usize, lr: f64, r: &'a LossReport) -> Self {
        let distill = |v| (!r.no_teacher).then_some(v);
        Self {
            task,
            step,
            lr,
            total: r.total,
            supervised_term: r.supervised_term,
            distill_class_term: distill(r.distill_class_term),
            distill_mask_term: distill(r.distill_mask_term),
            per_class: &r.per_class,
        }
    }
}

fn write_line(log: &mut Option<&mut dyn Write>, value: &impl Serialize) -> Result<()> {
    if let Some(w) = log.as_deref_mut() {
        let mut line = serde_json::to_vec(value)?;
        line.push(b'\n');
        w.write_all(&line).map_err(|e| Error::io("<train log>", e))?;
    }
    Ok(())
}

fn draw_sample<'a>(
    samples: &'a [SegSample],
    augment_flip: bool,
    rng: &mut ChaCha8Rng,
) -> std::borrow::Cow<'a, SegSample> {
    let s = &samples[rng.random_range(0..samples.len())];
    if augment_flip && rng.random_bool(0.5) {
        std::borrow::Cow::Owned(hflip(s))
    } else {
        std::borrow::Cow::Borrowed(s)
    }
}

/// Optimises `model` on `samples`. Old classes (those covered by `teacher`)
/// are distilled or pseudo-supervised, `new_ids` are supervised on the labels.
#[allow(clippy::too_many_arguments)]
pub fn fit_cit(
    model: &mut CitModel,
    samples: &[SegSample],
    new_ids: &[ClassId],
    teacher: Option<&TeacherPlan>,
    steps: usize,
    task_index: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut log: Option<&mut dyn Write>,
) -> Result<Option<f64>> {
    if samples.is_empty() {
        log::warn!("task {task_index}: empty training set, skipping optimisation");
        return Ok(None);
    }
    let distill = cfg.resolved().distill;
    let old_ids = teacher.map(|p| p.old_class_ids()).unwrap_or_default();
    let routing = RoutingTable::build(&model.bank.class_ids, &old_ids, new_ids)?;
    let mut opt = AdamW::new(cfg.optimizer.clone(), model.num_params());
    let weight = 1.0 / cfg.batch_size as f64;
    let tail_start = steps - (steps / 10).max(1);
    let mut tail = 0.0;

    for step in 0..steps {
        let mut grad = zeros_like(model);
        let mut report = LossReport::default();
        for _ in 0..cfg.batch_size {
            let sample = draw_sample(samples, cfg.augment_flip, rng);
            let (student, cache) = model.forward_train(&sample.image)?;
            let targets = teacher.map(|p| p.targets(&sample.image)).transpose()?;
            let mut g = LogitGrad::zeros_for(&student);
            let r = total_loss(
                &student,
                sample.label.view(),
                targets.as_ref(),
                &routing,
                &distill,
                Some((&mut g, weight)),
            )?;
            model.backward(&cache, &g.d_presence, &g.d_masks, &mut grad);
            report.accumulate_mean(&r, cfg.batch_size);
        }
        let lr = cfg.learning_rate_at(task_index, step, steps);
        if !report.total.is_finite() || !grad.all_finite() {
            let detail = format!(
                "loss {} (supervised {}, class {}, mask {}), finite gradient: {}",
                report.total,
                report.supervised_term,
                report.distill_class_term,
                report.distill_mask_term,
                grad.all_finite()
            );
            write_line(
                &mut log,
                &serde_json::json!({ "task": task_index, "step": step, "abort": detail }),
            )?;
            return Err(Error::NumericAbort {
                task: task_index,
                step,
                detail,
            });
        }
        write_line(&mut log, &StepRecord::new(task_index, step, lr, &report))?;
        if step >= tail_start {
            tail += report.total / (steps - tail_start) as f64;
        }
        opt.step(model, &grad, lr);
    }
    Ok(Some(tail))
}

/// Trains task `t`, then snapshots and registers the model.
pub fn train_task(
    state: &mut RunState,
    schedule: &TaskSchedule,
    t: usize,
    dataset: &TaskDataset,
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<TaskSummary> {
    if state.tasks_completed() != t {
        return Err(Error::Registry(format!(
            "task {t} requested after {} completed tasks",
            state.tasks_completed()
        )));
    }
    if dataset.task_index != t {
        return Err(Error::Argument(format!(
            "dataset belongs to task {}, not {t}",
            dataset.task_index
        )));
    }
    let group = schedule.group(t)?.clone();
    let teacher = if t > 0 {
        state.model.bank = state
            .model
            .bank
            .extend_queries(&group.class_ids, QueryInit::Random, &mut state.rng)?;
        Some(TeacherPlan::new(&state.registry, t, cfg.pipeline_mode)?)
    } else {
        None
    };
    let steps = cfg.steps_for_task(t);
    let final_loss = fit_cit(
        &mut state.model,
        &dataset.samples,
        &group.class_ids,
        teacher.as_ref(),
        steps,
        t,
        cfg,
        &mut state.rng,
        log,
    )?;

    let snapshot = ModelSnapshot::capture(
        &state.model,
        t,
        group.class_ids.clone(),
        serde_json::json!({ "train": cfg.resolved(), "schedule": schedule.to_doc() }),
    )?;
    state.registry.register_checkpoint(t, snapshot, &group)?;
    Ok(TaskSummary {
        task_index: t,
        steps: if dataset.samples.is_empty() { 0 } else { steps },
        train_samples: dataset.samples.len(),
        final_loss,
    })
}

/// Trains the per-pixel softmax baseline with mean cross-entropy.
pub fn fit_softmax(
    model: &mut SoftmaxModel,
    samples: &[SegSample],
    steps: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    let mut opt = AdamW::new(cfg.optimizer.clone(), model.num_params());
    let weight = 1.0 / cfg.batch_size as f64;
    let mut last = f64::NAN;
    for step in 0..steps {
        let mut grad = zeros_like(model);
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let sample = draw_sample(samples, cfg.augment_flip, rng);
            loss += weight * model.cross_entropy_step(&sample.image, &sample.label, &mut grad)?;
        }
        grad.visit_mut(&mut |p| p.iter_mut().for_each(|v| *v *= weight));
        if !loss.is_finite() {
            return Err(Error::NumericAbort {
                task: 0,
                step,
                detail: format!("softmax cross-entropy {loss}"),
            });
        }
        opt.step(model, &grad, cfg.learning_rate_at(0, step, steps));
        last = loss;
    }
    Ok(last)
}
