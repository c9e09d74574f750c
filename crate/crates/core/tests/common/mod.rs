#![allow(dead_code)]

pub mod fd;
pub mod oracle;

use nightseg_core::datagen::{generate_split, SceneOptions, StoredSample};
use nightseg_core::nets::ArchConfig;
use nightseg_core::trainer::{Batch, TrainConfig, Trainer};
use nightseg_core::types::{ClassTaxonomy, Domain, Image, LabelMap, PairedSample};
use nightseg_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        arch: ArchConfig::tiny(9),
        seed,
        steps: 10,
        ..TrainConfig::default()
    }
}

/// Tiny networks with live rendering heads, so every path carries gradient.
pub fn tiny_trainer(seed: u64) -> Trainer {
    let mut t = Trainer::new(tiny_config(seed), ClassTaxonomy::synthetic()).unwrap();
    t.bundle.randomize_render_heads(seed + 1, 0.5);
    t
}

pub fn random_image(rng: &mut ChaCha8Rng, size: usize, domain: Domain) -> Image {
    let data = (0..3 * size * size).map(|_| rng.random_range(-0.9..0.9)).collect();
    Image::new(Tensor::new(vec![1, 3, size, size], data), domain).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, size: usize) -> LabelMap {
    let data = (0..size * size)
        .map(|_| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..9u8) })
        .collect();
    LabelMap::new(size, size, data).unwrap()
}

pub fn random_batch(n: usize, size: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<PairedSample> = (0..n)
        .map(|i| {
            PairedSample::new(
                format!("r{i}"),
                random_image(&mut rng, size, Domain::Day),
                random_labels(&mut rng, size),
                random_image(&mut rng, size, Domain::Night),
                random_image(&mut rng, size, Domain::DayRef),
            )
            .unwrap()
        })
        .collect();
    Batch::from_samples(&samples).unwrap()
}

/// A handful of small synthetic scenes.
pub fn small_split(n: usize, size: usize, seed: u64) -> Vec<StoredSample> {
    let opts = SceneOptions {
        height: size,
        width: size,
        pose_shift_max_px: size as f64 / 16.0,
        ..SceneOptions::default()
    };
    generate_split(seed, "train", n, &opts)
        .unwrap()
        .iter()
        .map(|o| StoredSample::from_synth(o, true))
        .collect()
}
