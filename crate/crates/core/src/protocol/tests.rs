use super::*;
use crate::datagen::SceneSpec;

fn small_model() -> ModelConfig {
    ModelConfig {
        n_queries: 6,
        query_dim: 16,
        decoder_layers: 2,
        max_classes: 6,
        adapter_rank: 4,
        backbone_channels: 4,
        height: 16,
        width: 16,
    }
}

fn small_train(flags: MethodFlags) -> TrainConfig {
    TrainConfig {
        iterations_per_class: 8,
        batch_size: 2,
        flags,
        strict_deterministic: true,
        ..TrainConfig::default()
    }
}

fn scenario(steps: usize, n_ini: usize) -> ScenarioSpec {
    ScenarioSpec {
        n_ini,
        n_inc: 1,
        steps,
        images_per_step: 8,
        seed: 3,
    }
}

fn data(s: &ScenarioSpec) -> (Dataset, Dataset) {
    scenario_datasets(&SceneSpec::default_six(16, 16), s, 6).unwrap()
}

#[test]
fn flags_parse_and_label() {
    assert_eq!(MethodFlags::parse("").unwrap(), MethodFlags::none());
    assert_eq!(MethodFlags::parse("hdhl, ikd,qcr,pseudo").unwrap(), MethodFlags::all());
    assert_eq!(MethodFlags::parse("pseudo,hdhl").unwrap().label(), "pseudo+hdhl");
    assert_eq!(MethodFlags::none().label(), "ft");
    let err = MethodFlags::parse("hdhl,lora").unwrap_err().to_string();
    assert!(err.contains("lora") && err.contains("pseudo"));
}

#[test]
fn supervised_loss_decreases() {
    let s = ScenarioSpec {
        images_per_step: 12,
        ..scenario(1, 6)
    };
    let (train, _) = data(&s);
    let cfg = TrainConfig {
        iterations_per_class: 40,
        flags: MethodFlags::none(),
        ..small_train(MethodFlags::none())
    };
    let mut state = ScenarioState::new(small_model(), 0).unwrap();
    state.begin_step(1, &s.step_classes()[0], 0).unwrap();
    let log = train_step(&mut state, &train.samples, &cfg).unwrap();
    assert_eq!(log.iterations, 240);
    assert!(log.last_window_loss < log.first_window_loss, "{log:?}");
    assert!(!log.old_model_used);
    assert!(log.importance.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn empty_step_dataset_is_an_error() {
    let mut state = ScenarioState::new(small_model(), 0).unwrap();
    state.begin_step(1, &[ClassId(1)], 0).unwrap();
    assert!(matches!(
        train_step(&mut state, &[], &small_train(MethodFlags::all())),
        Err(LabError::EmptyStepDataset(1))
    ));
}

fn two_steps(flags: MethodFlags) -> (ScenarioState, StepLog, crate::domain::ModelOutput, ImageSample) {
    let s = scenario(2, 5);
    let (train, _) = data(&s);
    let steps = split_incremental(&train.samples, &s).unwrap();
    let cfg = small_train(flags);
    let mut state = ScenarioState::new(small_model(), 1).unwrap();
    state.begin_step(1, &s.step_classes()[0], 1).unwrap();
    train_step(&mut state, &steps[0], &cfg).unwrap();
    state.begin_step(2, &s.step_classes()[1], 1).unwrap();
    let probe = train.samples[0].clone();
    let before = state.old_model.as_ref().unwrap().forward(&probe, true).unwrap();
    let log = train_step(&mut state, &steps[1], &cfg).unwrap();
    (state, log, before, probe)
}

#[test]
fn old_model_stays_frozen() {
    let (state, log, before, probe) = two_steps(MethodFlags::all());
    assert!(log.old_model_used);
    let after = state.old_model.as_ref().unwrap().forward(&probe, true).unwrap();
    assert_eq!(before, after);
    assert_eq!(state.importance.step, 3);
}

#[test]
fn fine_tuning_never_reads_the_old_model() {
    let (_, log, _, _) = two_steps(MethodFlags::none());
    assert!(!log.old_model_used);
    assert_eq!(log.pseudo_segments, 0);
}

#[test]
fn strict_runs_are_bitwise_reproducible() {
    let (a, ..) = two_steps(MethodFlags::all());
    let (b, ..) = two_steps(MethodFlags::all());
    assert_eq!(a.model, b.model);
    assert_eq!(a.importance, b.importance);
}

#[test]
fn scenario_reports_one_snapshot_per_step() {
    let s = scenario(3, 4);
    let (train, val) = data(&s);
    let cfg = small_train(MethodFlags::all());
    let report = run_scenario(&ScenarioRun {
        scenario: &s,
        model: &small_model(),
        train: &cfg,
        train_data: &train.samples,
        val_data: &val.samples,
        checkpoint_dir: None,
        resume: false,
        stop_after: None,
    })
    .unwrap();
    report.validate().unwrap();
    assert_eq!(report.steps.len(), 3);
    assert_eq!(report.steps[2].classes, vec![ClassId(6)]);
    assert_eq!(report.adapter_parameters_per_class, 2 * 16 * 4);
    let json = serde_json::to_string(&report).unwrap();
    let back: ScenarioReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.without_timing().unwrap(), report.without_timing().unwrap());
}

#[test]
fn single_step_scenario_is_plain_training() {
    let s = scenario(1, 6);
    let (train, val) = data(&s);
    let cfg = small_train(MethodFlags::all());
    let report = run_scenario(&ScenarioRun {
        scenario: &s,
        model: &small_model(),
        train: &cfg,
        train_data: &train.samples,
        val_data: &val.samples,
        checkpoint_dir: None,
        resume: false,
        stop_after: None,
    })
    .unwrap();
    assert_eq!(report.steps.len(), 1);
    assert!(!report.steps[0].log.old_model_used);
    assert_eq!(report.steps[0].summary.incremental.pq, None);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let s = scenario(3, 4);
    let (train, val) = data(&s);
    let cfg = small_train(MethodFlags::all());
    let dir = tempfile::tempdir().unwrap();
    let run = |ckpt: Option<&Path>, resume, stop_after| {
        run_scenario(&ScenarioRun {
            scenario: &s,
            model: &small_model(),
            train: &cfg,
            train_data: &train.samples,
            val_data: &val.samples,
            checkpoint_dir: ckpt,
            resume,
            stop_after,
        })
        .unwrap()
    };
    let full = run(None, false, None);
    let partial = run(Some(dir.path()), false, Some(2));
    assert_eq!(partial.steps.len(), 2);
    let resumed = run(Some(dir.path()), true, None);
    assert_eq!(resumed.without_timing().unwrap(), full.without_timing().unwrap());
}
