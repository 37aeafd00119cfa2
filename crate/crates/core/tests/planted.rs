//! The planted-glyph generator: counts, ground-truth boxes and separability.

use patchdistill::harness::{generate_planted, PlantedSignalSpec};
use patchdistill::model::{train_sgd, ArchSpec, Example, Label, ModelCheckpoint, TrainConfig};

#[test]
fn default_corpus_counts_and_boxes() {
    let c = generate_planted(&PlantedSignalSpec::default()).unwrap();
    assert_eq!((c.train.len(), c.test.len()), (5000, 1000));
    assert_eq!((c.train_boxes.len(), c.test_boxes.len()), (5000, 1000));
    for (s, b) in c.train.iter().zip(&c.train_boxes) {
        assert_eq!((b.height, b.width), (12, 12));
        let fits = (0..3).any(|r| (0..3).any(|col| b.contained_in(r * 8, col * 8, 16, 16)));
        assert!(fits, "sample {}", s.id);
    }
    for class in 0..10 {
        assert_eq!(c.train.iter().filter(|s| s.label == class).count(), 500);
    }
    assert!(c.train.iter().enumerate().all(|(i, s)| s.id == i));
}

#[test]
fn zero_noise_background_is_constant() {
    let spec = PlantedSignalSpec {
        train_per_class: 3,
        test_per_class: 1,
        noise: 0.0,
        ..PlantedSignalSpec::default()
    };
    let c = generate_planted(&spec).unwrap();
    for (s, b) in c.train.iter().zip(&c.train_boxes) {
        for r in 0..32 {
            for col in 0..32 {
                if !b.overlaps(r, col, 1, 1) {
                    for ch in 0..3 {
                        assert_eq!(s.pixels.get(r, col, ch), spec.background);
                    }
                }
            }
        }
    }
}

#[test]
fn oversized_glyph_is_rejected() {
    let spec = PlantedSignalSpec {
        glyph_size: 17,
        ..PlantedSignalSpec::default()
    };
    assert!(generate_planted(&spec).is_err());
}

#[test]
fn same_seed_same_corpus() {
    let spec = PlantedSignalSpec {
        train_per_class: 4,
        test_per_class: 2,
        seed: 21,
        ..PlantedSignalSpec::default()
    };
    let (a, b) = (generate_planted(&spec).unwrap(), generate_planted(&spec).unwrap());
    assert_eq!(a.train, b.train);
    assert_eq!(a.test_boxes, b.test_boxes);
    let other = generate_planted(&PlantedSignalSpec { seed: 22, ..spec }).unwrap();
    assert_ne!(a.train, other.train);
}

#[test]
fn linear_probe_on_glyph_pixels_separates_classes() {
    let c = generate_planted(&PlantedSignalSpec {
        train_per_class: 100,
        test_per_class: 1,
        ..PlantedSignalSpec::default()
    })
    .unwrap();
    let examples: Vec<Example> = c
        .train
        .iter()
        .zip(&c.train_boxes)
        .map(|(s, b)| Example {
            input: s.pixels.crop(b.top, b.left, b.height, b.width).unwrap(),
            label: Label::Hard(s.label),
        })
        .collect();
    let init = ModelCheckpoint::zeros(ArchSpec::mlp(12, 12, 3, &[], 10)).unwrap();
    let config = TrainConfig {
        epochs: 20,
        eta: 0.05,
        batch_size: 16,
        checkpoint_epochs: Vec::new(),
        ..TrainConfig::default()
    };
    let probe = train_sgd(&init, &examples, &config).unwrap().pop().unwrap();
    let correct = examples
        .iter()
        .filter(|e| Label::Hard(probe.predict(&e.input).unwrap()) == e.label)
        .count();
    assert!(correct as f64 >= 0.99 * examples.len() as f64, "{correct}/{}", examples.len());
}
