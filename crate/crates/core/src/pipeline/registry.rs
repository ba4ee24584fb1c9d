use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CitModel, LogitBundle, ModelSnapshot};
use crate::schedule::{ClassGroup, ClassId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    /// Each old class is distilled from the snapshot of the task that introduced it.
    Accumulative,
    /// All old classes come from the previous task's snapshot.
    Iterative,
}

impl std::str::FromStr for PipelineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accumulative" => Ok(PipelineMode::Accumulative),
            "iterative" => Ok(PipelineMode::Iterative),
            other => Err(Error::Argument(format!("unknown pipeline mode {other:?}"))),
        }
    }
}

/// Append-only list of frozen snapshots; entry `t` owns group `t`.
#[derive(Debug, Clone, Default)]
pub struct CheckpointRegistry {
    entries: Vec<ModelSnapshot>,
}

impl CheckpointRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, t: usize) -> Result<&ModelSnapshot> {
        self.entries
            .get(t)
            .ok_or_else(|| Error::Registry(format!("no checkpoint for task {t}")))
    }

    pub fn entries(&self) -> &[ModelSnapshot] {
        &self.entries
    }

    /// Task whose snapshot owns `class`.
    pub fn source_of(&self, class: ClassId) -> Option<usize> {
        self.entries.iter().position(|s| s.owned_class_ids().contains(&class))
    }

    pub fn register_checkpoint(&mut self, t: usize, snapshot: ModelSnapshot, group: &ClassGroup) -> Result<()> {
        if t < self.entries.len() {
            return Err(Error::Registry(format!("task {t} is already registered")));
        }
        if t > self.entries.len() {
            return Err(Error::Registry(format!(
                "cannot register task {t}: tasks {}..{t} are missing",
                self.entries.len()
            )));
        }
        if snapshot.task_index() != t {
            return Err(Error::Registry(format!(
                "snapshot belongs to task {}, not {t}",
                snapshot.task_index()
            )));
        }
        if group.task_index != t || snapshot.owned_class_ids() != group.class_ids.as_slice() {
            return Err(Error::Registry(format!(
                "snapshot owns {:?} but group {} holds {:?}",
                snapshot.owned_class_ids(),
                group.task_index,
                group.class_ids
            )));
        }
        self.entries.push(snapshot);
        Ok(())
    }
}

/// Teacher models for one task, each restricted to the channels it supplies.
#[derive(Debug, Clone)]
pub struct TeacherPlan {
    mode: PipelineMode,
    /// `(source task, classes supplied, restricted model)`.
    teachers: Vec<(usize, Vec<ClassId>, CitModel)>,
}

impl TeacherPlan {
    pub fn new(registry: &CheckpointRegistry, t: usize, mode: PipelineMode) -> Result<Self> {
        if t == 0 {
            return Err(Error::Argument("task 0 has no teacher".into()));
        }
        if registry.len() < t {
            return Err(Error::Registry(format!(
                "task {t} needs checkpoints 0..{t}, registry has {}",
                registry.len()
            )));
        }
        let restricted = |m: usize, classes: Vec<ClassId>| -> Result<(usize, Vec<ClassId>, CitModel)> {
            let snap = registry.get(m)?;
            let model = CitModel {
                extractor: snap.model().extractor.clone(),
                bank: snap.model().bank.restrict(&classes)?,
            };
            Ok((m, classes, model))
        };
        let teachers = match mode {
            PipelineMode::Accumulative => (0..t)
                .map(|m| restricted(m, registry.get(m)?.owned_class_ids().to_vec()))
                .collect::<Result<Vec<_>>>()?,
            PipelineMode::Iterative => {
                let old: Vec<ClassId> = registry.entries[..t]
                    .iter()
                    .flat_map(|s| s.owned_class_ids().iter().copied())
                    .collect();
                vec![restricted(t - 1, old)?]
            }
        };
        Ok(Self { mode, teachers })
    }

    pub fn mode(&self) -> PipelineMode {
        self.mode
    }

    /// Old-class channels in class-id order.
    pub fn old_class_ids(&self) -> Vec<ClassId> {
        let mut ids: Vec<ClassId> = self.teachers.iter().flat_map(|(_, c, _)| c.iter().copied()).collect();
        ids.sort_unstable();
        ids
    }

    /// Source task of every supplied channel.
    pub fn sources(&self) -> Vec<(ClassId, usize)> {
        let mut out: Vec<(ClassId, usize)> = self
            .teachers
            .iter()
            .flat_map(|(m, c, _)| c.iter().map(move |&id| (id, *m)))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn targets(&self, image: &Array3<f32>) -> Result<LogitBundle> {
        let mut parts = Vec::with_capacity(self.teachers.len());
        for (m, classes, model) in &self.teachers {
            let part = model.forward(image)?;
            if part.class_ids != *classes {
                return Err(Error::Registry(format!(
                    "snapshot {m} produced channels {:?}, expected {classes:?}",
                    part.class_ids
                )));
            }
            parts.push(part);
        }
        let bundle = LogitBundle::concat(&parts)?;
        let ordered = self.old_class_ids();
        if bundle.class_ids == ordered {
            Ok(bundle)
        } else {
            bundle.restrict(&ordered)
        }
    }
}

pub fn assemble_targets_accumulative(
    registry: &CheckpointRegistry,
    image: &Array3<f32>,
    t: usize,
) -> Result<LogitBundle> {
    TeacherPlan::new(registry, t, PipelineMode::Accumulative)?.targets(image)
}

pub fn assemble_targets_iterative(registry: &CheckpointRegistry, image: &Array3<f32>, t: usize) -> Result<LogitBundle> {
    TeacherPlan::new(registry, t, PipelineMode::Iterative)?.targets(image)
}
