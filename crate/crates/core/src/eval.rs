//! Confusion matrices, IoU aggregation per class group, forgetting curves.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{semantic_decode, CitModel, Parameters, SoftmaxModel};
use crate::schedule::{ClassId, SegSample, TaskSchedule, BACKGROUND};

/// Rows are ground truth, columns predictions; index 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: Array2::zeros((num_classes + 1, num_classes + 1)),
        }
    }

    pub fn accumulate(&mut self, pred: ArrayView2<ClassId>, gt: ArrayView2<ClassId>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} and ground truth {:?} differ",
                pred.dim(),
                gt.dim()
            )));
        }
        let k = self.num_classes;
        if let Some(&bad) = pred.iter().chain(gt.iter()).find(|&&v| usize::from(v) > k) {
            return Err(Error::Contract(format!("label {bad} outside 0..={k}")));
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            self.counts[[usize::from(g), usize::from(p)]] += 1;
        }
        Ok(())
    }

    pub fn merge(&self, other: &ConfusionMatrix) -> Result<ConfusionMatrix> {
        if self.num_classes != other.num_classes {
            return Err(Error::Shape("confusion matrices of different sizes".into()));
        }
        Ok(ConfusionMatrix {
            num_classes: self.num_classes,
            counts: &self.counts + &other.counts,
        })
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// `TP / (TP + FP + FN)`, `None` when the class is absent from both maps.
    /// `(intersection, union)` pixel counts; `None` when the union is empty.
    pub fn iou_counts(&self, class: ClassId) -> Option<(u64, u64)> {
        let c = usize::from(class);
        let diag = self.counts[[c, c]];
        let row: u64 = self.counts.row(c).sum();
        let col: u64 = self.counts.column(c).sum();
        let union = row + col - diag;
        (union > 0).then_some((diag, union))
    }

    pub fn iou(&self, class: ClassId) -> Option<f64> {
        self.iou_counts(class).map(|(i, u)| i as f64 / u as f64)
    }

    /// Mean IoU over the defined classes of `subset`; `None` when none is defined.
    pub fn miou(&self, subset: &[ClassId]) -> Result<Option<f64>> {
        if subset.is_empty() {
            return Err(Error::Argument("mIoU over an empty class subset".into()));
        }
        if let Some(&bad) = subset.iter().find(|&&c| usize::from(c) > self.num_classes) {
            return Err(Error::Argument(format!("class {bad} outside 0..={}", self.num_classes)));
        }
        let defined: Vec<f64> = subset.iter().filter_map(|&c| self.iou(c)).collect();
        Ok((!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub task_index: usize,
    /// Every foreground class `1..=K`; `null` when undefined.
    pub per_class_iou: BTreeMap<ClassId, Option<f64>>,
    pub base: Option<f64>,
    pub new: Option<f64>,
    pub all: Option<f64>,
}

/// Base = task 0 classes, new = classes of tasks `1..=t`, all = both.
pub fn group_metrics(
    conf: &ConfusionMatrix,
    schedule: &TaskSchedule,
    t: usize,
    include_background: bool,
) -> Result<GroupMetrics> {
    schedule.group(t)?;
    let base = schedule.groups[0].class_ids.clone();
    let new: Vec<ClassId> = schedule.groups[1..=t]
        .iter()
        .flat_map(|g| g.class_ids.iter().copied())
        .collect();
    let mut all: Vec<ClassId> = base.iter().chain(&new).copied().collect();
    if include_background {
        all.insert(0, BACKGROUND);
    }
    let per_class_iou = (1..=conf.num_classes as ClassId).map(|c| (c, conf.iou(c))).collect();
    Ok(GroupMetrics {
        task_index: t,
        per_class_iou,
        base: conf.miou(&base)?,
        new: if new.is_empty() { None } else { conf.miou(&new)? },
        all: conf.miou(&all)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingCurve {
    /// `(task_index, base mIoU after that task)`.
    pub series: Vec<(usize, Option<f64>)>,
    /// Base mIoU after task 0.
    pub reference: Option<f64>,
    /// `series[0] - series[T]`.
    pub drop: Option<f64>,
}

pub fn forgetting_curve(history: &[GroupMetrics]) -> Result<ForgettingCurve> {
    if history.is_empty() {
        return Err(Error::Argument("empty metrics history".into()));
    }
    if history.iter().enumerate().any(|(i, m)| m.task_index != i) {
        return Err(Error::Argument("history must list tasks 0, 1, 2, ... in order".into()));
    }
    let series: Vec<(usize, Option<f64>)> = history.iter().map(|m| (m.task_index, m.base)).collect();
    let reference = series[0].1;
    let last = series[series.len() - 1].1;
    Ok(ForgettingCurve {
        drop: reference.zip(last).map(|(a, b)| a - b),
        series,
        reference,
    })
}

/// Exact learnable parameter count.
pub fn param_count(model: &impl Parameters) -> usize {
    model.num_params()
}

/// Confusion of the decoded class-independent predictions against full labels.
pub fn evaluate_cit(model: &CitModel, samples: &[SegSample], num_classes: usize, tau: f64) -> Result<ConfusionMatrix> {
    let mut conf = ConfusionMatrix::new(num_classes);
    for s in samples {
        let bundle = model.forward(&s.image)?;
        conf.accumulate(semantic_decode(&bundle, tau).view(), s.label.view())?;
    }
    Ok(conf)
}

pub fn evaluate_softmax(model: &SoftmaxModel, samples: &[SegSample], num_classes: usize) -> Result<ConfusionMatrix> {
    let mut conf = ConfusionMatrix::new(num_classes);
    for s in samples {
        conf.accumulate(model.predict(&s.image)?.view(), s.label.view())?;
    }
    Ok(conf)
}
