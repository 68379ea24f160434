use std::path::Path;

use vvt_core::attention::AttentionMode;
use vvt_core::backbone::{load_checkpoint, save_checkpoint, Model};
use vvt_core::train::{
    ablation_table, class_of_code, evaluate_top1, load_cifar, load_cifar_binary, load_dataset,
    synthetic_locality_dataset, train, CifarKind, DataSource, Dataset, DatasetSpec, TrainConfig, STAMP,
};
use vvt_core::Error;

fn config(train_size: usize, epochs: usize, classes: usize) -> TrainConfig {
    TrainConfig {
        lr: 2e-3,
        weight_decay: 0.05,
        warmup_epochs: 1,
        total_epochs: epochs,
        batch_size: 16,
        seed: 7,
        mode: AttentionMode::Vicinity2D,
        fr_ratio: None,
        fpc: true,
        random_crop: false,
        horizontal_flip: false,
        variant: "tiny".into(),
        channel_div: 8,
        depths: Some(vec![1, 1, 1, 1]),
        dataset: DatasetSpec {
            source: DataSource::Synthetic { seed: 3 },
            class_count: classes,
            side: 32,
            train_size,
            val_size: 64,
        },
    }
}

fn model_for(c: &TrainConfig) -> Model<f32> {
    Model::init(c.model_spec().unwrap(), c.seed).unwrap()
}

/// Finds the unique 3x3 window whose cells all exceed the noise ceiling and
/// reads the stamp back out of it.
fn match_template(d: &Dataset, i: usize) -> Option<usize> {
    let side = d.side();
    let px = d.pixels(i);
    let at = |y: usize, x: usize| px[(y * side + x) * d.channels()];
    let mut found = None;
    for y in 0..=side - STAMP {
        for x in 0..=side - STAMP {
            let cells: Vec<f32> = (0..STAMP * STAMP).map(|b| at(y + b / STAMP, x + b % STAMP)).collect();
            if cells.iter().all(|&v| v > 0.375) {
                if found.is_some() {
                    return None;
                }
                let code = cells.iter().enumerate().filter(|(_, &v)| v > 0.75).map(|(b, _)| 1 << b).sum();
                found = Some(class_of_code(code));
            }
        }
    }
    found
}

#[test]
fn template_matcher_recovers_every_label() {
    let d = synthetic_locality_dataset(0, 512, 32, 10).unwrap();
    for i in 0..d.len() {
        assert_eq!(match_template(&d, i), Some(d.label(i)), "image {i}");
    }
}

#[test]
fn synthetic_labels_are_balanced_and_reproducible() {
    let a = synthetic_locality_dataset(0, 512, 32, 10).unwrap();
    assert_eq!(a.checksum(), synthetic_locality_dataset(0, 512, 32, 10).unwrap().checksum());
    let mut counts = [0usize; 10];
    for &l in a.labels() {
        counts[l] += 1;
    }
    let mean = 51.2;
    assert!(counts.iter().all(|&c| (c as f64 - mean).abs() <= 0.1 * mean), "{counts:?}");
}

fn cifar_record(kind: CifarKind, coarse: u8, label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut r = match kind {
        CifarKind::Cifar10 => vec![label],
        CifarKind::Cifar100 => vec![coarse, label],
    };
    r.extend((0..3072).map(fill));
    r
}

fn write(path: &Path, records: &[Vec<u8>]) {
    std::fs::write(path, records.concat()).unwrap();
}

#[test]
fn cifar100_layout_and_fine_labels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.bin");
    let records: Vec<Vec<u8>> = (0..5u8)
        .map(|i| cifar_record(CifarKind::Cifar100, 19, 90 + i, |p| (p / 1024 * 100 + i as usize) as u8))
        .collect();
    write(&path, &records);
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 5 * 3074);
    let d = load_cifar_binary(&path, CifarKind::Cifar100).unwrap();
    assert_eq!(d.len(), 5);
    assert_eq!(d.labels(), &[90, 91, 92, 93, 94]);
    // Channel planes become interleaved channels of each pixel.
    assert_eq!(&d.pixels(2)[..3], &[2.0 / 255.0, 102.0 / 255.0, 202.0 / 255.0]);
    let again = load_cifar_binary(&path, CifarKind::Cifar100).unwrap();
    assert_eq!(d.checksum(), again.checksum());
}

#[test]
fn cifar_errors() {
    let dir = tempfile::tempdir().unwrap();
    let truncated = dir.path().join("short.bin");
    let mut bytes = cifar_record(CifarKind::Cifar10, 0, 3, |_| 0);
    bytes.pop();
    std::fs::write(&truncated, bytes).unwrap();
    assert!(matches!(load_cifar_binary(&truncated, CifarKind::Cifar10), Err(Error::Dataset(_))));

    let bad_label = dir.path().join("label.bin");
    write(&bad_label, &[cifar_record(CifarKind::Cifar10, 0, 10, |_| 0)]);
    assert!(matches!(load_cifar_binary(&bad_label, CifarKind::Cifar10), Err(Error::Dataset(_))));

    assert!(load_cifar_binary(dir.path().join("missing.bin"), CifarKind::Cifar10).is_err());
}

#[test]
fn cifar_splits_use_training_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let train_records: Vec<Vec<u8>> = (0..4u8).map(|i| cifar_record(CifarKind::Cifar100, 0, i, |p| (p % 7 * 30 + i as usize) as u8)).collect();
    write(&dir.path().join("train.bin"), &train_records);
    write(&dir.path().join("test.bin"), &[cifar_record(CifarKind::Cifar100, 0, 5, |_| 255)]);
    let (train_set, val) = load_cifar(dir.path(), CifarKind::Cifar100, 64, 10, 10).unwrap();
    assert_eq!((train_set.len(), val.len(), train_set.side()), (4, 1, 64));
    let stats = train_set.channel_stats();
    assert!(stats.mean.iter().all(|m| m.abs() < 1e-5));
    // The test image is brighter than anything in training.
    assert!(val.pixels(0).iter().all(|&v| v > 1.0));
}

#[test]
fn fixed_seed_gives_identical_logs() {
    let c = config(96, 2, 4);
    let (t, v) = load_dataset(&c.dataset, None).unwrap();
    let a = train(model_for(&c), &t, &v, &c, None).unwrap();
    let b = train(model_for(&c), &t, &v, &c, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
}

#[test]
fn augmented_runs_are_reproducible() {
    let c = TrainConfig { random_crop: true, horizontal_flip: true, ..config(64, 2, 4) };
    let (t, v) = load_dataset(&c.dataset, None).unwrap();
    let a = train(model_for(&c), &t, &v, &c, None).unwrap();
    let b = train(model_for(&c), &t, &v, &c, None).unwrap();
    assert_eq!(a.log, b.log);
}

#[test]
fn zero_lr_freezes_weights_and_loss() {
    let c = TrainConfig { lr: 0.0, ..config(96, 3, 4) };
    let (t, v) = load_dataset(&c.dataset, None).unwrap();
    let init = model_for(&c);
    let out = train(init.clone(), &t, &v, &c, None).unwrap();
    assert_eq!(out.model, init);
    let losses: Vec<u64> = out.log.iter().map(|r| r.train_loss.to_bits()).collect();
    assert!(losses.windows(2).all(|w| w[0] == w[1]), "{:?}", out.log);
}

#[test]
fn random_model_is_at_chance() {
    let c = config(16, 2, 10);
    let d = synthetic_locality_dataset(5, 1000, 32, 10).unwrap();
    let m = model_for(&c);
    let a = evaluate_top1(&m, &d).unwrap();
    assert!((a - 0.1).abs() <= 0.03, "{a}");
    assert_eq!(a.to_bits(), evaluate_top1(&m, &d).unwrap().to_bits());
}

#[test]
fn memorizes_a_small_set() {
    let c = TrainConfig {
        lr: 1e-3,
        weight_decay: 0.0,
        total_epochs: 40,
        channel_div: 4,
        batch_size: 32,
        ..config(64, 40, 4)
    };
    let (t, v) = load_dataset(&c.dataset, None).unwrap();
    let out = train(model_for(&c), &t, &v, &c, None).unwrap();
    assert_eq!(evaluate_top1(&out.model, &t).unwrap(), 1.0);
}

#[test]
fn checkpoint_round_trip_preserves_accuracy() {
    let c = config(64, 2, 4);
    let (t, v) = load_dataset(&c.dataset, None).unwrap();
    let out = train(model_for(&c), &t, &v, &c, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&out.model, dir.path()).unwrap();
    let back: Model<f32> = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back, out.model);
    assert_eq!(evaluate_top1(&back, &v).unwrap(), evaluate_top1(&out.model, &v).unwrap());
}

#[test]
fn non_finite_loss_aborts() {
    let c = config(32, 2, 4);
    let (t, v) = load_dataset(&c.dataset, None).unwrap();
    let mut m = model_for(&c);
    m.params.head.weight[[0, 0]] = f32::NAN;
    assert!(matches!(train(m, &t, &v, &c, None), Err(Error::Diverged { epoch: 1, step: 0, .. })));
}

#[test]
fn locality_ablation_emits_a_table() {
    let mut runs = Vec::new();
    for mode in [AttentionMode::NoLocality, AttentionMode::Vicinity2D] {
        let c = TrainConfig { mode, ..config(64, 2, 4) };
        let (t, v) = load_dataset(&c.dataset, None).unwrap();
        let out = train(model_for(&c), &t, &v, &c, None).unwrap();
        assert_eq!(out.model.num_params(), model_for(&config(64, 2, 4)).num_params());
        runs.push((mode, out.log));
    }
    let table = ablation_table(&runs);
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("nolocality") && table.contains("vicinity2d"));
}

#[test]
fn training_rejects_mismatched_classes() {
    let c = config(32, 2, 4);
    let (t, v) = load_dataset(&c.dataset, None).unwrap();
    let other = TrainConfig { dataset: DatasetSpec { class_count: 5, ..c.dataset.clone() }, ..c.clone() };
    assert!(train(model_for(&other), &t, &v, &c, None).is_err());
}
