use gaclab::data::{generate_synthetic, Dataset, SynthConfig};
use gaclab::demog::{classifier_accuracy, train_group_classifier, ClassifierConfig, LabelMode, LabelProvider};
use gaclab::Execution;

fn easy_groups() -> Dataset {
    generate_synthetic(&SynthConfig {
        nd: 4,
        subjects_per_group: 10,
        images_per_subject: 4,
        image_size: 16,
        group_signature_strength: 2.0,
        noise_std: 0.0,
        seed: 17,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn classifier_learns_strong_group_signal() {
    let ds = easy_groups();
    let cfg = ClassifierConfig {
        epochs: 30,
        ..ClassifierConfig::default()
    };
    let (clf, report) = train_group_classifier(&ds, &cfg, Execution::default()).unwrap();
    assert_eq!(report.per_group_accuracy.len(), 4);
    assert!(report.mean_accuracy >= 0.99, "{report:?}");
    assert!(report.held_out_samples > 0 && report.held_out_samples < ds.len());

    // With every sample classified correctly, estimated labels are the truth.
    let full = classifier_accuracy(&clf, &ds, Execution::default()).unwrap();
    assert!(full.per_group_accuracy.iter().all(|&a| a == 1.0), "{full:?}");
    let estimated = LabelProvider::estimated(clf.clone())
        .provide_labels(&ds.samples, Execution::default())
        .unwrap();
    assert_eq!(estimated, ds.groups());

    let dir = tempfile::tempdir().unwrap();
    clf.save(dir.path()).unwrap();
    let loaded = LabelProvider::from_mode(LabelMode::Estimated, 4, 0, Some(dir.path())).unwrap();
    assert_eq!(loaded.provide_labels(&ds.samples, Execution::Sequential).unwrap(), estimated);
    assert!(LabelProvider::from_mode(LabelMode::Estimated, 3, 0, Some(dir.path())).is_err());
}

#[test]
fn single_group_dataset_is_rejected() {
    let ds = generate_synthetic(&SynthConfig {
        nd: 1,
        subjects_per_group: 5,
        images_per_subject: 2,
        image_size: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    assert!(train_group_classifier(&ds, &ClassifierConfig::default(), Execution::Sequential).is_err());
}

#[test]
fn random_labels_are_uniform_and_stable() {
    let n = 10_000;
    let ds = generate_synthetic(&SynthConfig {
        nd: 4,
        subjects_per_group: n / 4,
        images_per_subject: 1,
        image_size: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    assert_eq!(ds.len(), n);
    let provider = LabelProvider::random(4, 2024);
    let labels = provider.provide_labels(&ds.samples, Execution::default()).unwrap();
    let p = 0.25;
    let bound = 4.0 * (p * (1.0 - p) / n as f64).sqrt();
    for g in 0..4 {
        let freq = labels.iter().filter(|&&l| l == g).count() as f64 / n as f64;
        assert!((freq - p).abs() <= bound, "group {g}: {freq}");
    }

    let again = LabelProvider::random(4, 2024);
    assert_eq!(again.provide_labels(&ds.samples, Execution::Sequential).unwrap(), labels);
    let reversed: Vec<_> = ds.samples.iter().rev().cloned().collect();
    let mut back = again.provide_labels(&reversed, Execution::Sequential).unwrap();
    back.reverse();
    assert_eq!(back, labels);
    assert_ne!(
        LabelProvider::random(4, 2025).provide_labels(&ds.samples, Execution::Sequential).unwrap(),
        labels
    );
}

#[test]
fn mode_names_round_trip() {
    for mode in [LabelMode::GroundTruth, LabelMode::Estimated, LabelMode::Random] {
        assert_eq!(LabelMode::parse(mode.name()).unwrap(), mode);
    }
    assert!(LabelMode::parse("oracle").is_err());
}
