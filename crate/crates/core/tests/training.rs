//! Training-loop oracles: capacity (memorize a tiny set), determinism, and
//! held-out perplexity improvement for every variant.

use objdrive_core::diffcore::checkpoint;
use objdrive_core::objectcentric::{RepresentationConfig, Variant};
use objdrive_core::perception::{BackboneConfig, BoundingBox, BoxClass, ImageTensor};
use objdrive_core::policy::{
    evaluate_perplexity, train, Head, PolicyConfig, TrainConfig, TrainFrame,
};

fn tiny_cfg(variant: Variant) -> PolicyConfig {
    PolicyConfig {
        image: (3, 32, 32),
        backbone: BackboneConfig {
            in_channels: 3,
            widths: [4, 6, 8, 8],
        },
        rep: RepresentationConfig {
            variant,
            k: 2,
            bins: 2,
            selector_uses_global: true,
        },
        head: Head::Action9,
    }
}

/// Synthetic frame whose label is recoverable from the image: a bright
/// block sits in one of nine grid positions.
fn synthetic_frame(label: usize, jitter: u64) -> TrainFrame {
    let mut image = ImageTensor::zeros(3, 32, 32);
    let (gy, gx) = (label / 3, label % 3);
    let (r0, c0) = (2 + gy * 10, 2 + gx * 10);
    for r in r0..r0 + 8 {
        for c in c0..c0 + 8 {
            image.set_pixel(0, r, c, 1.0);
            image.set_pixel(1, r, c, 0.6);
        }
    }
    // Mild deterministic texture so frames are not exact duplicates.
    for i in 0..12 {
        let r = ((jitter as usize * 31 + i * 17) % 32) as usize;
        let c = ((jitter as usize * 13 + i * 23) % 32) as usize;
        image.set_pixel(2, r, c, 0.5);
    }
    let bbox = BoundingBox {
        class: BoxClass::Vehicle,
        x_min: c0 as f64,
        y_min: r0 as f64,
        x_max: (c0 + 8) as f64,
        y_max: (r0 + 8) as f64,
    };
    TrainFrame {
        image,
        boxes: vec![bbox],
        label,
    }
}

fn synthetic_set(count: usize, salt: u64) -> Vec<TrainFrame> {
    (0..count)
        .map(|i| synthetic_frame(i % 9, salt + i as u64))
        .collect()
}

/// Capacity check: the small net must memorize a 200-frame subset, reaching
/// mean loss < 0.05 well within 200 epochs.
#[test]
fn overfit_oracle_small_subset() {
    let cfg = tiny_cfg(Variant::SparseSum);
    let frames = synthetic_set(200, 0);
    let tc = TrainConfig {
        learning_rate: 0.002,
        weight_decay: 0.0,
        batch_size: 16,
        epochs: 200,
        seed: 3,
        stop_loss: Some(0.05),
    };
    let result = train(&cfg, &frames, &tc).unwrap();
    let best = result
        .epoch_losses
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    assert!(
        best < 0.05,
        "failed to memorize: best epoch loss {best} over {} epochs",
        result.epoch_losses.len()
    );
}

/// Same seed, same data -> byte-identical checkpoints.
#[test]
fn training_checkpoints_are_bit_reproducible() {
    let cfg = tiny_cfg(Variant::SparseConcat);
    let frames = synthetic_set(24, 5);
    let tc = TrainConfig {
        batch_size: 8,
        epochs: 2,
        seed: 77,
        ..TrainConfig::default()
    };
    let a = train(&cfg, &frames, &tc).unwrap();
    let b = train(&cfg, &frames, &tc).unwrap();
    let mut bytes_a = Vec::new();
    checkpoint::write(&a.params, &mut bytes_a).unwrap();
    let mut bytes_b = Vec::new();
    checkpoint::write(&b.params, &mut bytes_b).unwrap();
    assert_eq!(bytes_a, bytes_b);
}

/// Held-out perplexity must drop after training, for every variant.
#[test]
fn perplexity_improves_after_training_all_variants() {
    let train_frames = synthetic_set(120, 100);
    let test_frames = synthetic_set(36, 900);
    for variant in Variant::ALL {
        let cfg = tiny_cfg(variant);
        let tc = TrainConfig {
            learning_rate: 0.002,
            batch_size: 16,
            epochs: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let before = evaluate_perplexity(&cfg, &cfg.init_params(9), &test_frames).unwrap();
        let result = train(&cfg, &train_frames, &tc).unwrap();
        let after = evaluate_perplexity(&cfg, &result.params, &test_frames).unwrap();
        assert!(
            after < before,
            "{variant:?}: perplexity {after} did not improve on {before}"
        );
    }
}
