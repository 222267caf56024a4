use adapmtl::checkpoint::{config_hash, CheckpointError, CHECKPOINT_VERSION};
use adapmtl::data::default_tasks;
use adapmtl::trainer::{spec_for_tasks, TrainConfig, Trainer};
use adapmtl::{Checkpoint, MultitaskModel, SynthDataset};

fn trained(epochs: usize) -> (Trainer, SynthDataset) {
    let d = SynthDataset::generate(1, 200, 4, &default_tasks()).unwrap();
    let m = MultitaskModel::build(&spec_for_tasks(vec![4, 8], &[4, 4, 4], &d.tasks), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(m, &d, cfg).unwrap();
    t.run_until(&d, epochs).unwrap();
    (t, d)
}

#[test]
fn save_load_round_trip_is_exact() {
    let (t, _) = trained(3);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    let ck = Checkpoint::from_trainer(&t);
    ck.save(&p).unwrap();
    let back = Checkpoint::load(&p).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.format_version, CHECKPOINT_VERSION);
    assert_eq!(back.into_trainer(), t);
}

#[test]
fn config_hash_tracks_the_config() {
    let a = TrainConfig::default();
    let b = TrainConfig {
        lr: 0.03,
        ..a.clone()
    };
    assert_eq!(config_hash(&a), config_hash(&a.clone()));
    assert_ne!(config_hash(&a), config_hash(&b));
    assert_eq!(config_hash(&a).len(), 64);
}

#[test]
fn tampered_or_foreign_checkpoints_are_rejected() {
    let (t, _) = trained(1);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");

    let mut ck = Checkpoint::from_trainer(&t);
    ck.config.lr = 0.5;
    ck.save(&p).unwrap();
    assert!(matches!(Checkpoint::load(&p), Err(CheckpointError::ConfigHash { .. })));

    let mut ck = Checkpoint::from_trainer(&t);
    ck.format_version = 99;
    ck.save(&p).unwrap();
    assert!(matches!(
        Checkpoint::load(&p),
        Err(CheckpointError::Version { found: 99 })
    ));

    std::fs::write(&p, "{not json").unwrap();
    assert!(matches!(Checkpoint::load(&p), Err(CheckpointError::Json { .. })));
    assert!(matches!(
        Checkpoint::load(&dir.path().join("missing.json")),
        Err(CheckpointError::Io { .. })
    ));
}

#[test]
fn resumed_run_finishes_like_the_original() {
    let (mut full, d) = trained(6);
    let (half, _) = trained(2);
    let json = Checkpoint::from_trainer(&half).to_json();
    let mut resumed = serde_json::from_str::<Checkpoint>(&json).unwrap().into_trainer();
    resumed.run(&d).unwrap();
    assert_eq!(resumed, full);
    assert!(full.run_epoch(&d).is_err());
}
