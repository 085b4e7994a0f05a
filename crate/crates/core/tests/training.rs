use lanegen::checkpoint;
use lanegen::dataio::{DatasetSplit, SamplePair};
use lanegen::model::ArchConfig;
use lanegen::nn::Module;
use lanegen::synth::{synth_dataset, SplitCounts};
use lanegen::trainer::{train, train_step, SourceMode, TrainConfig, TrainOptions, TrainState};
use lanegen::ClassPalette;

fn eight_samples(size: usize) -> DatasetSplit {
    let counts = SplitCounts { train: 8, val: 1, test: 1 };
    synth_dataset(1, counts, &ClassPalette::default(), size).unwrap().train
}

fn small_arch() -> ArchConfig {
    ArchConfig { image_size: 32, base_channels: 8, depth: 3, leaky_slope: 0.2, skip_levels: vec![1, 2] }
}

#[test]
fn hundred_steps_reduce_mse_and_stay_finite() {
    let split = eight_samples(64);
    let cfg = TrainConfig { batch_size: 4, epochs: 50, allow_no_persistence: true, ..TrainConfig::default() };
    let state = TrainState::new(&cfg).unwrap();
    let (mut state, rows) = train(&split, &cfg, &ClassPalette::default(), state, &TrainOptions::default()).unwrap();
    assert_eq!(rows.len(), 100);
    let (first, last) = (rows[0].losses.l_mse, rows[99].losses.l_mse);
    assert!(last < first, "l_mse {first} -> {last}");
    for (_, p) in state.generator.params_mut() {
        assert!(p.value.iter().all(|v| v.is_finite()));
    }
    for (_, p) in state.discriminator.params_mut() {
        assert!(p.value.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn zero_adversarial_weight_equals_pure_regression() {
    let split = eight_samples(32);
    let batch: Vec<&SamplePair> = split.samples.iter().take(4).collect();
    let p = ClassPalette::default();
    let base = TrainConfig { arch: small_arch(), seed: 5, ..TrainConfig::default() };
    let zero = TrainConfig { weights: lanegen::losses::LossWeights { mse: 100.0, adv: 0.0 }, ..base.clone() };
    let off = TrainConfig { adversarial_enabled: false, ..base };
    let mut a = TrainState::new(&zero).unwrap();
    let mut b = TrainState::new(&off).unwrap();
    for _ in 0..5 {
        train_step(&mut a, &batch, &zero, &p).unwrap();
        train_step(&mut b, &batch, &off, &p).unwrap();
    }
    assert_eq!(a.generator_checksum(), b.generator_checksum());
}

#[test]
fn resume_matches_uninterrupted_training() {
    for mode in [SourceMode::Teacher, SourceMode::Noise] {
        let split = eight_samples(32);
        let p = ClassPalette::default();
        let cfg = TrainConfig { arch: small_arch(), batch_size: 3, epochs: 2, seed: 11, source_mode: mode, ..TrainConfig::default() };
        let dir = tempfile::tempdir().unwrap();

        let full_dir = dir.path().join("full");
        let opts = TrainOptions { out_dir: Some(full_dir.clone()) };
        let (mut full, full_rows) = train(&split, &cfg, &p, TrainState::new(&cfg).unwrap(), &opts).unwrap();

        let part_dir = dir.path().join("part");
        let opts = TrainOptions { out_dir: Some(part_dir.clone()) };
        let one = TrainConfig { epochs: 1, ..cfg.clone() };
        train(&split, &one, &p, TrainState::new(&cfg).unwrap(), &opts).unwrap();
        let (resumed, _) = checkpoint::load(&part_dir.join("final.ckpt")).unwrap();
        assert_eq!(resumed.epoch, 1);
        let (mut resumed, rows) = train(&split, &cfg, &p, resumed, &opts).unwrap();

        assert_eq!(resumed.generator_checksum(), full.generator_checksum());
        assert_eq!(resumed.discriminator_checksum(), full.discriminator_checksum());
        assert_eq!(rows[..], full_rows[full_rows.len() - rows.len()..]);
        let a = std::fs::read_to_string(full_dir.join("train_log.csv")).unwrap();
        let b = std::fs::read_to_string(part_dir.join("train_log.csv")).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn periodic_checkpoints_are_written() {
    let split = eight_samples(32);
    let cfg = TrainConfig { arch: small_arch(), batch_size: 8, epochs: 2, checkpoint_every: 1, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()) };
    train(&split, &cfg, &ClassPalette::default(), TrainState::new(&cfg).unwrap(), &opts).unwrap();
    for f in ["checkpoints/epoch_0001.ckpt", "checkpoints/epoch_0002.ckpt", "final.ckpt", "train_log.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn unwritable_checkpoint_dir_aborts() {
    let split = eight_samples(32);
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let cfg = TrainConfig { arch: small_arch(), batch_size: 8, epochs: 1, ..TrainConfig::default() };
    let opts = TrainOptions { out_dir: Some(blocker.join("run")) };
    let r = train(&split, &cfg, &ClassPalette::default(), TrainState::new(&cfg).unwrap(), &opts);
    assert!(matches!(r, Err(lanegen::Error::Io { .. })), "{r:?}");
}
