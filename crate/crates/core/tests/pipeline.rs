//! Small end-to-end runs through the public API.

use stylemap::flow::{build_model, FlowConfig, Variant};
use stylemap::imaging::{generate_synthetic, Split, SynthSpec};
use stylemap::style::{apply_style, dataset_style_map, extract_style, StyleVector};
use stylemap::training::{evaluate, train, TrainConfig};
use stylemap::ModelContainer;

fn spec() -> SynthSpec {
    SynthSpec {
        factors: 2,
        pairs: 10,
        width: 32,
        height: 32,
        degree: 2,
        seed: 21,
        ..SynthSpec::default()
    }
}

fn short_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        initial_lr: 2e-3,
        pixels_per_step: 256,
        seed: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn short_training_improves_reconstruction() {
    let data = generate_synthetic(&spec()).unwrap();
    let train_pairs: Vec<_> = data.split(Split::Train).into_iter().cloned().collect();
    let mut model = build_model(FlowConfig::new(Variant::Dim2Split, 2, 8, 3)).unwrap();
    let report = train(&mut model, &train_pairs, &[], &short_config()).unwrap();
    assert_eq!(report.epochs.len(), 3);
    let first = report.epochs[0].train_psnr.unwrap();
    assert!(report.best_score.unwrap() >= first);
    assert!(evaluate(&model, &train_pairs).unwrap().mean_db.is_finite());
}

#[test]
fn saved_model_serves_the_same_styles() {
    let data = generate_synthetic(&spec()).unwrap();
    let pairs: Vec<_> = data.pairs.clone();
    let mut model = build_model(FlowConfig::new(Variant::Dim3, 2, 8, 4)).unwrap();
    train(&mut model, &pairs[..8], &[], &short_config()).unwrap();

    let container = ModelContainer::new(model);
    let id = container.model_id();
    let reloaded = ModelContainer::from_bytes(&container.to_bytes()).unwrap();
    assert_eq!(reloaded.model_id(), id);

    let before = dataset_style_map(&container.model, &id, &pairs).unwrap();
    let after = dataset_style_map(&reloaded.model, &id, &pairs).unwrap();
    assert_eq!(before.entries.len(), pairs.len());
    for (a, b) in before.entries.iter().zip(&after.entries) {
        assert_eq!(a.values, b.values);
    }

    let p = &pairs[0];
    let style = extract_style(&reloaded.model, &p.source, &p.target, &p.id).unwrap();
    let a = apply_style(&container.model, &p.source, &style).unwrap();
    let b = apply_style(&reloaded.model, &p.source, &style).unwrap();
    assert_eq!(a.pixels(), b.pixels());
    assert_ne!(a.pixels(), apply_style(&reloaded.model, &p.source, &StyleVector::zero(3).unwrap()).unwrap().pixels());
}
