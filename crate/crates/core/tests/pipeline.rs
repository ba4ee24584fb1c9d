mod common;

use std::fs;

use citseg::eval::{evaluate_cit, group_metrics};
use citseg::model::{CitModel, ModelConfig, ModelSnapshot, Parameters};
use citseg::pipeline::{
    assemble_targets_accumulative, assemble_targets_iterative, run_experiment, train_task, CheckpointRegistry,
    ExperimentConfig, PipelineMode, ResultsReport, RunState, RunStatus, TeacherPlan, RESULTS_FORMAT_VERSION,
};
use citseg::schedule::{build_schedule, filter_dataset, ClassId, Protocol, TaskSchedule};
use citseg::synthdata::{generate_dataset, SynthConfig};
use citseg::Error;
use common::{active_model, rng, small_samples};
use ndarray::Array1;

/// Snapshot whose every logit for class `ids[k]` equals `values[k]`.
fn stub(t: usize, ids: &[ClassId], values: &[f64], owned: &[ClassId]) -> ModelSnapshot {
    let mut model = CitModel::new(&ModelConfig::default(), ids.to_vec(), &mut rng(t as u64)).unwrap();
    model.bank.queries.fill(0.0);
    model.bank.mask_bias = Array1::from(values.to_vec());
    ModelSnapshot::capture(&model, t, owned.to_vec(), serde_json::Value::Null).unwrap()
}

fn one_two_three_four() -> TaskSchedule {
    let s = build_schedule(4, 2, 1, Protocol::Overlap).unwrap();
    assert_eq!(s.to_doc().groups, vec![vec![1, 2], vec![3], vec![4]]);
    s
}

fn stub_registry(corrupt_class_one: bool) -> CheckpointRegistry {
    let s = one_two_three_four();
    let mut reg = CheckpointRegistry::new();
    reg.register_checkpoint(0, stub(0, &[1, 2], &[1.0, 2.0], &[1, 2]), &s.groups[0])
        .unwrap();
    let first = if corrupt_class_one { -50.0 } else { 11.0 };
    reg.register_checkpoint(1, stub(1, &[1, 2, 3], &[first, 12.0, 13.0], &[3]), &s.groups[1])
        .unwrap();
    reg
}

fn constant_channels(bundle: &citseg::model::LogitBundle) -> Vec<f64> {
    (0..bundle.len())
        .map(|k| {
            let v = bundle.presence_logits[k];
            assert!(bundle
                .mask_logits
                .index_axis(ndarray::Axis(0), k)
                .iter()
                .all(|&m| m == v));
            v
        })
        .collect()
}

#[test]
fn registry_accepts_in_order_and_rejects_the_rest() {
    let s = one_two_three_four();
    let mut reg = CheckpointRegistry::new();
    reg.register_checkpoint(0, stub(0, &[1, 2], &[0.0, 0.0], &[1, 2]), &s.groups[0])
        .unwrap();
    assert_eq!(reg.len(), 1);

    let dup = reg.register_checkpoint(0, stub(0, &[1, 2], &[0.0, 0.0], &[1, 2]), &s.groups[0]);
    assert!(matches!(dup, Err(Error::Registry(_))));
    let gap = reg.register_checkpoint(2, stub(2, &[1, 2, 3, 4], &[0.0; 4], &[4]), &s.groups[2]);
    assert!(matches!(gap, Err(Error::Registry(_))));
    let wrong_index = reg.register_checkpoint(1, stub(2, &[1, 2, 3], &[0.0; 3], &[3]), &s.groups[1]);
    assert!(matches!(wrong_index, Err(Error::Registry(_))));
    let wrong_owner = reg.register_checkpoint(1, stub(1, &[1, 2, 3], &[0.0; 3], &[2, 3]), &s.groups[1]);
    assert!(matches!(wrong_owner, Err(Error::Registry(_))));
    assert_eq!(reg.len(), 1);
}

#[test]
fn accumulative_routes_each_class_to_its_source() {
    let reg = stub_registry(false);
    let image = &small_samples(1, 0)[0].image;
    let acc = assemble_targets_accumulative(&reg, image, 2).unwrap();
    assert_eq!(acc.class_ids, vec![1, 2, 3]);
    assert_eq!(constant_channels(&acc), vec![1.0, 2.0, 13.0]);
    let it = assemble_targets_iterative(&reg, image, 2).unwrap();
    assert_eq!(it.class_ids, vec![1, 2, 3]);
    assert_eq!(constant_channels(&it), vec![11.0, 12.0, 13.0]);

    let plan = TeacherPlan::new(&reg, 2, PipelineMode::Accumulative).unwrap();
    assert_eq!(plan.sources(), vec![(1, 0), (2, 0), (3, 1)]);
    for (class, source) in plan.sources() {
        assert_eq!(reg.source_of(class), Some(source));
    }
}

#[test]
fn corrupted_latest_snapshot_only_reaches_iterative_targets() {
    let reg = stub_registry(true);
    let image = &small_samples(1, 1)[0].image;
    let acc = assemble_targets_accumulative(&reg, image, 2).unwrap();
    let it = assemble_targets_iterative(&reg, image, 2).unwrap();
    assert_eq!(constant_channels(&acc)[0], 1.0);
    assert_eq!(constant_channels(&it)[0], -50.0);
}

#[test]
fn single_teacher_modes_agree() {
    let reg = stub_registry(false);
    for sample in small_samples(2, 2) {
        let acc = assemble_targets_accumulative(&reg, &sample.image, 1).unwrap();
        let it = assemble_targets_iterative(&reg, &sample.image, 1).unwrap();
        assert_eq!(acc, it);
        assert_eq!(acc.len(), 2);
    }
}

#[test]
fn missing_source_is_a_registry_error() {
    let s = one_two_three_four();
    let mut reg = CheckpointRegistry::new();
    reg.register_checkpoint(0, stub(0, &[1, 2], &[0.0, 0.0], &[1, 2]), &s.groups[0])
        .unwrap();
    let image = &small_samples(1, 0)[0].image;
    assert!(matches!(
        assemble_targets_accumulative(&reg, image, 2),
        Err(Error::Registry(_))
    ));
    assert!(matches!(
        assemble_targets_iterative(&reg, image, 2),
        Err(Error::Registry(_))
    ));
}

#[test]
fn teacher_channels_equal_source_forward() {
    let s = one_two_three_four();
    let m0 = active_model(vec![1, 2], 30);
    let mut m1 = m0.clone();
    m1.bank = m1
        .bank
        .extend_queries(&[3], citseg::model::QueryInit::Random, &mut rng(1))
        .unwrap();
    m1.extractor.visit_mut(&mut |p| p.iter_mut().for_each(|v| *v *= 1.01));
    let mut reg = CheckpointRegistry::new();
    reg.register_checkpoint(
        0,
        ModelSnapshot::capture(&m0, 0, vec![1, 2], serde_json::Value::Null).unwrap(),
        &s.groups[0],
    )
    .unwrap();
    reg.register_checkpoint(
        1,
        ModelSnapshot::capture(&m1, 1, vec![3], serde_json::Value::Null).unwrap(),
        &s.groups[1],
    )
    .unwrap();
    let image = &small_samples(1, 3)[0].image;
    let acc = assemble_targets_accumulative(&reg, image, 2).unwrap();
    assert_eq!(acc.restrict(&[1, 2]).unwrap(), m0.forward(image).unwrap());
    assert_eq!(
        acc.restrict(&[3]).unwrap(),
        m1.forward(image).unwrap().restrict(&[3]).unwrap()
    );
    let it = assemble_targets_iterative(&reg, image, 2).unwrap();
    assert_eq!(it, m1.forward(image).unwrap());
}

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.synth = SynthConfig {
        num_classes: 4,
        image_size: 32,
        seed: 5,
        ..SynthConfig::default()
    };
    cfg.data.train_size = 48;
    cfg.data.test_size = 12;
    cfg.schedule.init = 2;
    cfg.schedule.incr = 1;
    cfg.train.steps_per_task = 6;
    cfg.train.batch_size = 2;
    cfg
}

#[test]
fn train_task_registers_and_logs() {
    let cfg = tiny_config().resolved();
    let schedule = cfg.task_schedule().unwrap();
    let train = generate_dataset(&cfg.synth, cfg.data.train_size);
    let mut state = RunState::new(&cfg.train, &schedule).unwrap();

    let d0 = filter_dataset(&train, &schedule, 0).unwrap();
    let mut log = Vec::new();
    let summary = train_task(&mut state, &schedule, 0, &d0, &cfg.train, Some(&mut log)).unwrap();
    assert_eq!(state.registry.len(), 1);
    assert_eq!(summary.steps, 6);
    let lines: Vec<serde_json::Value> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    assert!(lines
        .iter()
        .all(|l| l.get("distill_class_term").is_none() && l.get("supervised_term").is_some()));

    let frozen = state.registry.get(0).unwrap().param_digest();
    let d1 = filter_dataset(&train, &schedule, 1).unwrap();
    let mut log = Vec::new();
    train_task(&mut state, &schedule, 1, &d1, &cfg.train, Some(&mut log)).unwrap();
    assert_eq!(state.model.bank.class_ids, vec![1, 2, 3]);
    assert_eq!(state.registry.get(0).unwrap().param_digest(), frozen);
    let first: serde_json::Value = serde_json::from_slice(log.split(|&b| b == b'\n').next().unwrap()).unwrap();
    assert!(first.get("distill_mask_term").is_some());

    let d2 = filter_dataset(&train, &schedule, 2).unwrap();
    assert!(matches!(
        train_task(&mut state, &schedule, 1, &d2, &cfg.train, None),
        Err(Error::Registry(_))
    ));
    train_task(&mut state, &schedule, 2, &d2, &cfg.train, None).unwrap();
    let owned: Vec<ClassId> = state
        .registry
        .entries()
        .iter()
        .flat_map(|s| s.owned_class_ids().to_vec())
        .collect();
    assert_eq!(owned, vec![1, 2, 3, 4]);
}

#[test]
fn single_task_run_is_plain_training() {
    let mut cfg = tiny_config();
    cfg.schedule.init = 4;
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.tasks.len(), 1);
    assert_eq!(report.tasks[0].metrics.new, None);

    let cfg = cfg.resolved();
    let schedule = cfg.task_schedule().unwrap();
    let train = generate_dataset(&cfg.synth, cfg.data.train_size);
    let test = citseg::synthdata::generate_test_split(&cfg.synth, cfg.data.test_size);
    let mut state = RunState::new(&cfg.train, &schedule).unwrap();
    let d0 = filter_dataset(&train, &schedule, 0).unwrap();
    train_task(&mut state, &schedule, 0, &d0, &cfg.train, None).unwrap();
    let conf = evaluate_cit(&state.model, &test, 4, cfg.eval.tau).unwrap();
    let metrics = group_metrics(&conf, &schedule, 0, false).unwrap();
    assert_eq!(report.tasks[0].metrics, metrics);
}

#[test]
fn experiment_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.output_dir = Some(dir.path().join("a"));
    cfg.eval.oracle = true;
    let a = run_experiment(&cfg).unwrap();
    cfg.output_dir = Some(dir.path().join("b"));
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.without_timing().unwrap(), b.without_timing().unwrap());
    assert_eq!(a.status, RunStatus::Complete);
    assert!(a.oracle.is_some());
    assert_eq!(a.tasks.len(), 3);
    for (t, task) in a.tasks.iter().enumerate() {
        assert_eq!(task.metrics.task_index, t);
        assert!(task.metrics.base.is_some() && task.metrics.all.is_some());
        assert_eq!(task.metrics.new.is_some(), t > 0);
    }
    assert_eq!(a.forgetting.as_ref().unwrap().series.len(), 3);

    let root = dir.path().join("a");
    let text = fs::read_to_string(root.join("results.json")).unwrap();
    let on_disk: ResultsReport = serde_json::from_str(&text).unwrap();
    assert_eq!(on_disk.format_version, RESULTS_FORMAT_VERSION);
    assert_eq!(on_disk.without_timing().unwrap(), a.without_timing().unwrap());
    let raw: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(raw["tasks"][0]["metrics"]["per_class_iou"].get("1").is_some());
    assert_eq!(raw["config"]["train"]["distill"]["lambda1"], 1.0);

    let config: ExperimentConfig =
        serde_json::from_str(&fs::read_to_string(root.join("config.json")).unwrap()).unwrap();
    assert_eq!(config.schedule.total, Some(4));
    let csv = fs::read_to_string(root.join("curves").join("miou.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("task_index,base_miou,new_miou,all_miou"));
    assert_eq!(csv.lines().count(), 4);
    for t in 0..3 {
        let log = fs::read_to_string(root.join("logs").join(format!("train_{t}.jsonl"))).unwrap();
        assert_eq!(log.lines().count(), cfg.train.steps_for_task(t));
        let snap = ModelSnapshot::load(&root.join("registry").join(format!("task_{t}"))).unwrap();
        assert_eq!(snap.param_digest(), a.checkpoints[t].param_digest);
    }
}

#[test]
fn modes_agree_through_the_first_incremental_task() {
    let mut cfg = tiny_config();
    cfg.train.pipeline_mode = PipelineMode::Accumulative;
    let acc = run_experiment(&cfg).unwrap();
    cfg.train.pipeline_mode = PipelineMode::Iterative;
    let it = run_experiment(&cfg).unwrap();
    assert_eq!(acc.tasks[..2], it.tasks[..2]);
    assert_eq!(acc.checkpoints[..2], it.checkpoints[..2]);
    assert_ne!(acc.checkpoints[2].param_digest, it.checkpoints[2].param_digest);
}

#[test]
fn numeric_blowup_aborts_and_keeps_partial_results() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.train.learning_rate = 1e250;
    cfg.output_dir = Some(dir.path().to_path_buf());
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, Error::NumericAbort { task: 0, .. }), "{err}");
    let partial: ResultsReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("results.json")).unwrap()).unwrap();
    assert_eq!(partial.status, RunStatus::Failed);
    assert!(partial.error.unwrap().contains("non-finite"));
    let log = fs::read_to_string(dir.path().join("logs").join("train_0.jsonl")).unwrap();
    assert!(log.lines().last().unwrap().contains("abort"));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = tiny_config();
    cfg.schedule.total = Some(5);
    assert!(matches!(run_experiment(&cfg), Err(Error::Argument(_))));
    let mut cfg = tiny_config();
    cfg.train.incremental_factor = 0.0;
    assert!(run_experiment(&cfg).is_err());
    let mut cfg = tiny_config();
    cfg.schedule.init = 0;
    assert!(run_experiment(&cfg).is_err());
}
