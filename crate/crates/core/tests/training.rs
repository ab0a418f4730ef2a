//! Trainer contracts on a tiny model: phase freezing, determinism,
//! reporting and the modes around the main recipe.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use urnet_core::data::{make_synthetic, Dataset};
use urnet_core::model::ParamGroup;
use urnet_core::trainer::{
    pretrain_backbone, train_baseline, train_phase_cgm_only, train_urnet, BaselineMode, ScaleSchedule, TrainConfig, TrainData,
    REPORT_HEADER,
};
use urnet_core::{Error, ModelSpec, UrnetModel};

fn spec() -> ModelSpec {
    ModelSpec {
        in_channels: 3,
        stage_channels: vec![4, 8, 8],
        blocks_per_stage: vec![2, 1, 1],
        num_classes: 3,
        reduction: 2,
        use_feature_input: true,
        gate_training_probability: 0.1,
    }
}

fn setup() -> (UrnetModel, Dataset, TrainConfig) {
    let model = UrnetModel::new(spec(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let data = make_synthetic(48, 3, 8, 1).unwrap();
    let cfg = TrainConfig { batch_size: 16, ..TrainConfig::desk(3, 2) };
    (model, data, cfg)
}

fn checksum(model: &UrnetModel, group: Option<ParamGroup>) -> Vec<u64> {
    let params = model.params().into_iter().filter(|p| group.is_none_or(|g| p.group == g));
    let stats = model.running_stats().into_iter().flat_map(|(_, s)| s.mean.into_iter().chain(s.var));
    params.flat_map(|p| p.value.data().to_vec()).chain(stats.filter(|_| group != Some(ParamGroup::Gate))).map(f64::to_bits).collect()
}

#[test]
fn gate_phase_leaves_backbone_bitwise_unchanged() {
    let (mut model, data, cfg) = setup();
    let backbone = checksum(&model, Some(ParamGroup::Backbone));
    let gates = checksum(&model, Some(ParamGroup::Gate));
    let report = train_phase_cgm_only(&mut model, &TrainData::new(&data), &cfg).unwrap();
    assert_eq!(report.epochs.len(), 2);
    assert!(report.epochs.iter().all(|e| e.phase == "cgm_only"));
    assert_eq!(checksum(&model, Some(ParamGroup::Backbone)), backbone);
    assert_ne!(checksum(&model, Some(ParamGroup::Gate)), gates);
}

#[test]
fn seeded_runs_are_identical() {
    let run = || {
        let (mut model, data, cfg) = setup();
        let report = train_urnet(&mut model, &TrainData::new(&data), &cfg).unwrap();
        (checksum(&model, None), report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    let phases: Vec<&str> = ra.epochs.iter().map(|e| e.phase.as_str()).collect();
    assert_eq!(phases, ["cgm_only", "cgm_only", "joint"]);
    assert_eq!(ra.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), [0, 1, 2]);
}

#[test]
fn joint_phase_moves_the_backbone() {
    let (mut model, data, cfg) = setup();
    let backbone = checksum(&model, Some(ParamGroup::Backbone));
    train_urnet(&mut model, &TrainData::new(&data), &cfg).unwrap();
    assert_ne!(checksum(&model, Some(ParamGroup::Backbone)), backbone);
}

#[test]
fn report_csv_has_one_row_per_epoch() {
    let (mut model, data, cfg) = setup();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    let td = TrainData { train: &data, val: Some(&data), report_csv: Some(path.clone()) };
    pretrain_backbone(&mut model, &td, &cfg, 1, 1.0).unwrap();
    train_urnet(&mut model, &td, &cfg).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], REPORT_HEADER);
    let phases: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(phases, ["pretrain", "cgm_only", "cgm_only", "joint"]);
    let cols = REPORT_HEADER.split(',').count();
    assert!(lines.iter().all(|l| l.split(',').count() == cols));
}

#[test]
fn sampled_scales_respect_the_range() {
    let (mut model, data, cfg) = setup();
    let cfg = TrainConfig { scale: ScaleSchedule::Range { min: 0.4, max: 0.7 }, ..cfg };
    let report = train_urnet(&mut model, &TrainData::new(&data), &cfg).unwrap();
    for e in &report.epochs {
        assert!(e.scale_min >= 0.4 && e.scale_max <= 0.7, "{e:?}");
    }
}

#[test]
fn fixed_mode_anneals_from_one() {
    let (mut model, data, cfg) = setup();
    let cfg = TrainConfig { scale: ScaleSchedule::Fixed { s_fixed: 0.5, sigma: 0.0, anneal_epochs: 2 }, ..cfg };
    let report = train_urnet(&mut model, &TrainData::new(&data), &cfg).unwrap();
    let means: Vec<f64> = report.epochs.iter().map(|e| e.scale_mean).collect();
    assert_eq!(means, [1.0, 0.75, 0.5]);
}

#[test]
fn baseline_requires_random_drop_mode() {
    let (mut model, data, cfg) = setup();
    assert!(matches!(train_baseline(&mut model, &TrainData::new(&data), &cfg), Err(Error::Config(_))));
    let cfg = TrainConfig { baseline_mode: BaselineMode::RandomDrop, ..cfg };
    let report = train_baseline(&mut model, &TrainData::new(&data), &cfg).unwrap();
    assert!(report.epochs.iter().all(|e| e.phase == "baseline" && e.loss_scale == 0.0));
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let (mut model, data, cfg) = setup();
    let bad = TrainConfig { epochs_cgm_only: 9, ..cfg.clone() };
    assert!(matches!(train_urnet(&mut model, &TrainData::new(&data), &bad), Err(Error::Config(_))));
    assert!(matches!(data.take(0), Err(Error::Data(_))));
    let single = data.take(1).unwrap();
    assert!(matches!(train_urnet(&mut model, &TrainData::new(&single), &cfg), Err(Error::Data(_))));
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let (mut model, data, cfg) = setup();
    let cfg =
        TrainConfig { optimizer: urnet_core::trainer::OptimizerKind::sgd(), lr_schedule: vec![(0, 1e200)], epochs_cgm_only: 0, ..cfg };
    match train_urnet(&mut model, &TrainData::new(&data), &cfg) {
        Err(Error::Divergence { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}
