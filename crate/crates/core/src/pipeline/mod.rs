//! Continual training: checkpoint registry, teacher assembly, per-task loops
//! and end-to-end experiment runs.

mod experiment;
mod registry;
mod train;

pub use experiment::{
    adapted_model, compare_heads, curve_csv, run_experiment, train_oracle, CheckpointRecord, DataConfig, EvalConfig,
    ExperimentConfig, HeadComparison, MetricPolicy, ResultsReport, RunStatus, ScheduleConfig, TaskReport, Timing,
    RESULTS_FORMAT_VERSION,
};
pub use registry::{
    assemble_targets_accumulative, assemble_targets_iterative, CheckpointRegistry, PipelineMode, TeacherPlan,
};
pub use train::{fit_cit, fit_softmax, train_task, RunState, TaskSummary, TrainConfig};
