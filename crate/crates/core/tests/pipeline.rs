use milsample::data::{
    generate_synthetic, read_bag, split_kfold, write_dataset, DatasetManifest, Regime, SyntheticSpec,
};
use milsample::eval::{parse_predictions_csv, predictions_csv};
use milsample::interpret::{attention_map, parse_pgm, write_heatmap};
use milsample::model::{read_checkpoint, write_checkpoint};
use milsample::sampling::SamplingPolicy;
use milsample::training::{train_kfold, TrainConfig};

fn spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        regime: Regime::Focal {
            witness_rate: 0.1,
            separation: 3.0,
        },
        bags_per_class: 8,
        bag_size: 30,
        feature_dim: 6,
        seed,
    }
}

fn config() -> TrainConfig {
    TrainConfig {
        lr: 5e-3,
        max_epochs: 6,
        block_widths: vec![8, 6],
        attention_dim: 4,
        sampling: SamplingPolicy::Fraction(0.3),
        seed: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn disk_round_trip_feeds_training_and_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let dev = generate_synthetic(&spec(5), "dev").unwrap();
    let test = generate_synthetic(
        &SyntheticSpec {
            bags_per_class: 5,
            ..spec(5)
        },
        "test",
    )
    .unwrap();
    write_dataset(&dev.bags, dir.path(), "dev.tsv").unwrap();
    write_dataset(&test.bags, dir.path(), "test.tsv").unwrap();

    let dev_loaded = DatasetManifest::read(&dir.path().join("dev.tsv"))
        .unwrap()
        .load_bags()
        .unwrap();
    let test_loaded = DatasetManifest::read(&dir.path().join("test.tsv"))
        .unwrap()
        .load_bags()
        .unwrap();
    assert_eq!(dev_loaded, dev.bags);
    assert_eq!(test_loaded, test.bags);

    let items: Vec<(String, usize)> = dev_loaded.iter().map(|b| (b.bag_id.clone(), b.label)).collect();
    let plan = split_kfold(&items, 2, 2).unwrap();
    let report = train_kfold(&dev_loaded, &test_loaded, &plan, &config(), 1).unwrap();
    assert_eq!(report.folds.len(), 2);
    for fold in &report.folds {
        assert!(fold.test_counters.is_zero());
        assert!(fold.frozen_unchanged);
        assert!((0.0..=1.0).contains(&fold.test_auc));
    }

    let fold = &report.folds[0];
    let ckpt_path = dir.path().join("fold0.milc");
    write_checkpoint(&fold.checkpoint, &ckpt_path).unwrap();
    let ckpt = read_checkpoint(&ckpt_path).unwrap();
    assert_eq!(ckpt.model, fold.checkpoint.model);

    let preds = parse_predictions_csv(&predictions_csv(&fold.test_scores)).unwrap();
    assert_eq!(preds, fold.test_scores);

    let bag = read_bag(&dir.path().join("bags").join("test-pos-0000.milb")).unwrap();
    let map = attention_map(&bag, &ckpt.model).unwrap();
    let (pgm, csv) = write_heatmap(&map, &dir.path().join("heat")).unwrap();
    let (w, h, pixels) = parse_pgm(&std::fs::read(pgm).unwrap()).unwrap();
    assert_eq!((w, h), (6, 5));
    assert_eq!(pixels.len(), 30);
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 31);
}

#[test]
fn kfold_results_do_not_depend_on_parallelism() {
    let dev = generate_synthetic(&spec(9), "dev").unwrap().bags;
    let test = generate_synthetic(
        &SyntheticSpec {
            bags_per_class: 4,
            ..spec(9)
        },
        "test",
    )
    .unwrap()
    .bags;
    let items: Vec<(String, usize)> = dev.iter().map(|b| (b.bag_id.clone(), b.label)).collect();
    let plan = split_kfold(&items, 3, 4).unwrap();
    let serial = train_kfold(&dev, &test, &plan, &config(), 1).unwrap();
    let parallel = train_kfold(&dev, &test, &plan, &config(), 3).unwrap();
    assert_eq!(serial.summary_csv("x"), parallel.summary_csv("x"));
    assert_eq!(serial.folds_csv(), parallel.folds_csv());
}
