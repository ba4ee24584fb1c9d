//! Incremental task schedules and per-task dataset construction.
//!
//! A schedule partitions the foreground classes `1..=K` into consecutive
//! groups. Task `t` only ever sees ground truth for its own group: every other
//! foreground pixel is folded into background (id 0) by [`relabel_sample`].

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = u8;

pub const BACKGROUND: ClassId = 0;

/// Largest class count representable in an 8-bit label map.
pub const MAX_CLASSES: usize = u8::MAX as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Overlap,
    Disjoint,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlap" => Ok(Protocol::Overlap),
            "disjoint" => Ok(Protocol::Disjoint),
            other => Err(Error::Argument(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassGroup {
    pub task_index: usize,
    pub class_ids: Vec<ClassId>,
}

impl ClassGroup {
    pub fn contains(&self, class: ClassId) -> bool {
        self.class_ids.binary_search(&class).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSchedule {
    pub total_classes: usize,
    pub protocol: Protocol,
    pub groups: Vec<ClassGroup>,
}

/// On-disk form of a schedule. Field names are part of the file format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleDoc {
    pub total_classes: usize,
    pub protocol: Protocol,
    pub groups: Vec<Vec<ClassId>>,
}

impl TaskSchedule {
    /// Number of tasks, i.e. `T + 1`.
    pub fn num_tasks(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, task: usize) -> Result<&ClassGroup> {
        self.groups
            .get(task)
            .ok_or_else(|| Error::Argument(format!("task {task} outside schedule with {} tasks", self.groups.len())))
    }

    /// Classes first supervised in tasks `0..task` (exclusive).
    pub fn classes_before(&self, task: usize) -> Vec<ClassId> {
        self.groups
            .iter()
            .take(task)
            .flat_map(|g| g.class_ids.iter().copied())
            .collect()
    }

    /// Classes known after finishing `task` (inclusive).
    pub fn classes_through(&self, task: usize) -> Vec<ClassId> {
        self.classes_before(task + 1)
    }

    /// Task whose group owns `class`.
    pub fn source_task(&self, class: ClassId) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(class))
    }

    pub fn to_doc(&self) -> ScheduleDoc {
        ScheduleDoc {
            total_classes: self.total_classes,
            protocol: self.protocol,
            groups: self.groups.iter().map(|g| g.class_ids.clone()).collect(),
        }
    }

    /// Rebuilds a schedule from its document form, checking every invariant.
    pub fn from_doc(doc: &ScheduleDoc) -> Result<Self> {
        let schedule = TaskSchedule {
            total_classes: doc.total_classes,
            protocol: doc.protocol,
            groups: doc
                .groups
                .iter()
                .enumerate()
                .map(|(task_index, ids)| ClassGroup {
                    task_index,
                    class_ids: ids.clone(),
                })
                .collect(),
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_classes == 0 || self.total_classes > MAX_CLASSES {
            return Err(Error::Schedule(format!(
                "total_classes must be in 1..={MAX_CLASSES}, got {}",
                self.total_classes
            )));
        }
        let mut seen = BTreeSet::new();
        for (i, group) in self.groups.iter().enumerate() {
            if group.task_index != i {
                return Err(Error::Schedule(format!(
                    "group at position {i} has task_index {}",
                    group.task_index
                )));
            }
            if group.class_ids.is_empty() {
                return Err(Error::Schedule(format!("group {i} is empty")));
            }
            if group.class_ids.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Schedule(format!(
                    "group {i} class ids are not strictly increasing"
                )));
            }
            for &c in &group.class_ids {
                if c == BACKGROUND {
                    return Err(Error::Schedule(format!("group {i} contains background")));
                }
                if !seen.insert(c) {
                    return Err(Error::Schedule(format!("class {c} appears in two groups")));
                }
            }
        }
        let expected: BTreeSet<ClassId> = (1..=self.total_classes as ClassId).collect();
        if seen != expected {
            return Err(Error::Schedule(format!(
                "groups cover {} classes, expected exactly 1..={}",
                seen.len(),
                self.total_classes
            )));
        }
        Ok(())
    }
}

/// Builds the `init-incr` schedule: classes `1..=init_count` in task 0, then
/// consecutive blocks of `incr_count`.
pub fn build_schedule(
    total_classes: usize,
    init_count: usize,
    incr_count: usize,
    protocol: Protocol,
) -> Result<TaskSchedule> {
    if total_classes > MAX_CLASSES {
        return Err(Error::Argument(format!(
            "total_classes {total_classes} exceeds {MAX_CLASSES}"
        )));
    }
    if init_count == 0 || init_count > total_classes {
        return Err(Error::Argument(format!(
            "init_count must be in 1..={total_classes}, got {init_count}"
        )));
    }
    if incr_count == 0 {
        return Err(Error::Argument("incr_count must be at least 1".into()));
    }
    let remainder = total_classes - init_count;
    if !remainder.is_multiple_of(incr_count) {
        return Err(Error::Schedule(format!(
            "{remainder} incremental classes are not divisible into groups of {incr_count}"
        )));
    }

    let ids = |lo: usize, hi: usize| (lo..=hi).map(|c| c as ClassId).collect::<Vec<_>>();
    let mut groups = vec![ClassGroup {
        task_index: 0,
        class_ids: ids(1, init_count),
    }];
    for k in 0..remainder / incr_count {
        let lo = init_count + k * incr_count + 1;
        groups.push(ClassGroup {
            task_index: k + 1,
            class_ids: ids(lo, lo + incr_count - 1),
        });
    }
    Ok(TaskSchedule {
        total_classes,
        protocol,
        groups,
    })
}

/// One image with its dense label map.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Array3<f32>,
    /// `[H, W]`, values in `0..=K`.
    pub label: Array2<ClassId>,
    pub sample_id: u64,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.label.nrows()
    }

    pub fn width(&self) -> usize {
        self.label.ncols()
    }

    pub fn contains_class(&self, class: ClassId) -> bool {
        self.label.iter().any(|&v| v == class)
    }

    /// Sorted set of foreground classes present.
    pub fn present_classes(&self) -> BTreeSet<ClassId> {
        self.label.iter().copied().filter(|&v| v != BACKGROUND).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub task_index: usize,
    pub samples: Vec<SegSample>,
    pub visible_class_ids: Vec<ClassId>,
}

/// Keeps only the current group's pixels; every other foreground id becomes
/// background.
pub fn relabel_sample(sample: &SegSample, current_group: &ClassGroup) -> SegSample {
    SegSample {
        image: sample.image.clone(),
        label: sample
            .label
            .mapv(|v| if current_group.contains(v) { v } else { BACKGROUND }),
        sample_id: sample.sample_id,
    }
}

/// Selects and relabels the training samples for task `t`.
///
/// Inclusion is decided on the original annotation. Under `Overlap` a sample
/// qualifies if it shows any class of the current group; `Disjoint` further
/// rejects samples showing any class of a later group.
pub fn filter_dataset(base: &[SegSample], schedule: &TaskSchedule, t: usize) -> Result<TaskDataset> {
    let group = schedule.group(t)?;
    let future: BTreeSet<ClassId> = schedule.groups[t + 1..]
        .iter()
        .flat_map(|g| g.class_ids.iter().copied())
        .collect();

    let samples: Vec<SegSample> = base
        .iter()
        .filter(|s| {
            let present = s.present_classes();
            let has_current = present.iter().any(|&c| group.contains(c));
            match schedule.protocol {
                Protocol::Overlap => has_current,
                Protocol::Disjoint => has_current && present.is_disjoint(&future),
            }
        })
        .map(|s| relabel_sample(s, group))
        .collect();

    if samples.is_empty() {
        log::warn!(
            "task {t}: no sample qualifies under the {:?} protocol",
            schedule.protocol
        );
    }
    Ok(TaskDataset {
        task_index: t,
        samples,
        visible_class_ids: group.class_ids.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample(label: Array2<ClassId>) -> SegSample {
        let (h, w) = label.dim();
        SegSample {
            image: Array3::zeros((3, h, w)),
            label,
            sample_id: 0,
        }
    }

    #[test]
    fn paper_settings() {
        let s = build_schedule(20, 15, 5, Protocol::Overlap).unwrap();
        assert_eq!(s.num_tasks(), 2);
        assert_eq!(s.groups[0].class_ids, (1..=15).collect::<Vec<_>>());
        assert_eq!(s.groups[1].class_ids, (16..=20).collect::<Vec<_>>());

        let s = build_schedule(150, 100, 5, Protocol::Disjoint).unwrap();
        assert_eq!(s.num_tasks(), 11);
        assert_eq!(s.groups[0].class_ids.len(), 100);
        assert!(s.groups[1..].iter().all(|g| g.class_ids.len() == 5));
        assert_eq!(s.groups[10].class_ids, vec![146, 147, 148, 149, 150]);
        s.validate().unwrap();
    }

    #[test]
    fn single_task_schedule() {
        for incr in [1, 3, 7] {
            let s = build_schedule(10, 10, incr, Protocol::Overlap).unwrap();
            assert_eq!(s.num_tasks(), 1);
            assert_eq!(s.groups[0].class_ids, (1..=10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn schedule_errors() {
        assert!(matches!(
            build_schedule(20, 15, 3, Protocol::Overlap),
            Err(Error::Schedule(_))
        ));
        assert!(matches!(
            build_schedule(10, 11, 1, Protocol::Overlap),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            build_schedule(10, 0, 1, Protocol::Overlap),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            build_schedule(10, 4, 0, Protocol::Overlap),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn doc_round_trip_and_field_names() {
        let s = build_schedule(8, 4, 2, Protocol::Disjoint).unwrap();
        let json = serde_json::to_string(&s.to_doc()).unwrap();
        assert_eq!(
            json,
            r#"{"total_classes":8,"protocol":"disjoint","groups":[[1,2,3,4],[5,6],[7,8]]}"#
        );
        let doc: ScheduleDoc = serde_json::from_str(&json).unwrap();
        assert_eq!(TaskSchedule::from_doc(&doc).unwrap(), s);

        let bad = ScheduleDoc {
            total_classes: 4,
            protocol: Protocol::Overlap,
            groups: vec![vec![1, 2], vec![2, 3, 4]],
        };
        assert!(TaskSchedule::from_doc(&bad).is_err());
    }

    #[test]
    fn relabel_examples() {
        let group = ClassGroup {
            task_index: 0,
            class_ids: vec![3],
        };
        let out = relabel_sample(&sample(array![[3, 7], [0, 3]]), &group);
        assert_eq!(out.label, array![[3, 0], [0, 3]]);

        let only_current = sample(array![[3, 3], [0, 3]]);
        assert_eq!(relabel_sample(&only_current, &group), only_current);
    }

    #[test]
    fn disjoint_excludes_future_overlap_keeps() {
        let schedule = build_schedule(4, 2, 2, Protocol::Disjoint).unwrap();
        let base = vec![sample(array![[1, 3], [0, 0]])];
        let disjoint = filter_dataset(&base, &schedule, 0).unwrap();
        assert!(disjoint.samples.is_empty());

        let overlap_schedule = TaskSchedule {
            protocol: Protocol::Overlap,
            ..schedule
        };
        let overlap = filter_dataset(&base, &overlap_schedule, 0).unwrap();
        assert_eq!(overlap.samples.len(), 1);
        assert_eq!(overlap.samples[0].label, array![[1, 0], [0, 0]]);
        assert_eq!(overlap.visible_class_ids, vec![1, 2]);
    }

    #[test]
    fn past_classes_do_not_block_disjoint() {
        let schedule = build_schedule(4, 2, 1, Protocol::Disjoint).unwrap();
        let base = vec![sample(array![[1, 3], [0, 0]])];
        let ds = filter_dataset(&base, &schedule, 1).unwrap();
        assert_eq!(ds.samples.len(), 1);
        assert_eq!(ds.samples[0].label, array![[0, 3], [0, 0]]);
    }
}
