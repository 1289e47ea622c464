use mfcc::checkpoint::Checkpoint;
use mfcc::datagen::{generate_dataset, load_dataset, GenConfig, Split};
use mfcc::density::count_from_map;
use mfcc::fusion::FusionConfig;
use mfcc::supervisor::{supervise, Intensity, SupervisorParams};
use mfcc::training::{self, load_samples, Stage, TrainConfig};

fn small_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model.fusion = FusionConfig { channels: [4, 4, 4, 4] };
    c.model.counting.backbone_channels = [4, 4, 8];
    c.epochs = 2;
    c.lr = 1e-6;
    c
}

#[test]
fn dataset_to_alert() {
    let dir = tempfile::tempdir().unwrap();
    let mut gen = GenConfig::new(6, 17);
    gen.people = (5, 40);
    assert_eq!(generate_dataset(dir.path(), &gen).unwrap(), (4, 2));

    let cfg = small_config();
    let train = load_samples(&load_dataset(dir.path(), Split::Train).unwrap(), &cfg).unwrap();
    let test = load_samples(&load_dataset(dir.path(), Split::Test).unwrap(), &cfg).unwrap();
    assert_eq!((train.len(), test.len()), (4, 2));
    for s in &train {
        assert!((s.density_target.sum() - s.count).abs() < 1e-9 * s.count.max(1.0));
    }

    let s1 = training::train(&cfg, &train, Stage::Fusion, None, |_| {}).unwrap();
    assert!(s1.history.iter().all(|r| r.stage == 1 && r.loss_counting.is_none()));
    let path = dir.path().join("s1.ckpt");
    s1.checkpoint(&cfg, Stage::Fusion).save(&path).unwrap();

    let ck = Checkpoint::load(&path).unwrap();
    let s2 = training::train(&cfg, &train, Stage::Unified, Some(&ck), |_| {}).unwrap();
    assert_eq!(s2.history.len(), cfg.epochs);
    assert!(s2.history.iter().all(|r| r.loss_counting.is_some() && r.loss_total.is_finite()));

    let bytes = s2.checkpoint(&cfg, Stage::Unified).to_bytes();
    let (model, restored) = training::model_from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(restored, cfg);

    let report = training::evaluate(&model, &test, cfg.sigma).unwrap();
    let direct = training::evaluate(&s2.model, &test, cfg.sigma).unwrap();
    assert_eq!(report, direct);
    assert!(report.rmse >= report.mae);

    let out = model.infer(&test[0].visible, &test[0].thermal, cfg.sigma).unwrap();
    let full = out.density.upsample_conserving(8).unwrap();
    assert!((count_from_map(&full) - count_from_map(&out.density)).abs() < 1e-12);
    let quiet = supervise(&full, &SupervisorParams::new(f64::MAX)).unwrap();
    assert_eq!(quiet.intensity, Intensity::Normal);
}

#[test]
fn stage_two_needs_stage_one() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(dir.path(), &GenConfig::new(2, 1)).unwrap();
    let cfg = small_config();
    let samples = load_samples(&load_dataset(dir.path(), Split::Train).unwrap(), &cfg).unwrap();
    let err = training::train(&cfg, &samples, Stage::Unified, None, |_| {}).unwrap_err();
    assert!(err.to_string().contains("stage-1"), "{err}");
}
