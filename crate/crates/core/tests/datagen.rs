//! Synthetic corpus statistics, alignment, export and the Cityscapes-layout adapter.

use std::fs;

use nightseg_core::datagen::{
    export_cityscapes, export_split, generate_split, identity_id_map, label_agreement, load_cityscapes_labels,
    load_cityscapes_tree, load_split, night_render, synth_sample, split_seed, DatasetManifest, NightParams, PoseShift,
    SceneOptions, SceneSpec, StoredSample, SynthOutput,
};
use nightseg_core::types::{ClassTaxonomy, LabelMap};
use nightseg_core::{io, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(n: usize, seed: u64, split: &str) -> Vec<SynthOutput> {
    let opts = SceneOptions {
        height: 64,
        width: 64,
        pose_shift_max_px: 6.0,
        ..SceneOptions::default()
    };
    generate_split(seed, split, n, &opts).unwrap()
}

fn mean_intensity(t: &nightseg_core::Tensor) -> f64 {
    t.data().iter().map(|v| (v + 1.0) * 0.5).sum::<f64>() / t.numel() as f64
}

#[test]
fn every_class_is_common_in_a_default_corpus() {
    let corpus = generate_split(17, "train", 200, &SceneOptions::default()).unwrap();
    let mut seen = [0usize; 9];
    for s in &corpus {
        let mut present = [false; 9];
        for l in [&s.sample.y_day, &s.y_night] {
            for &v in l.data() {
                if (v as usize) < 9 {
                    present[v as usize] = true;
                }
            }
        }
        for k in 0..9 {
            seen[k] += present[k] as usize;
        }
    }
    for (k, &n) in seen.iter().enumerate() {
        assert!(n * 20 >= corpus.len(), "class {k} in only {n} of {} samples", corpus.len());
    }
}

#[test]
fn default_nights_are_dark() {
    let corpus = generate_split(3, "train", 50, &SceneOptions::default()).unwrap();
    let night: f64 = corpus.iter().map(|s| mean_intensity(s.sample.x_night.tensor())).sum();
    let day: f64 = corpus.iter().map(|s| mean_intensity(s.sample.x_day_ref.tensor())).sum();
    assert!(night < 0.4 * day, "night {night:.3} vs day {day:.3}");
}

#[test]
fn invisible_class_sits_at_the_noise_floor() {
    let s = &small(1, 4, "train")[0];
    let mut params = NightParams::default();
    params.visibility[2] = 0.0;
    params.noise = 0.05;
    let day = &s.sample.x_day_ref;
    let labels = &s.y_day_ref;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // average over repeated renders so the estimate is tight
    let (mut sum, mut n) = (0.0, 0usize);
    for _ in 0..40 {
        let x = night_render(day, labels, &params, &mut rng).unwrap();
        let hw = labels.len();
        for c in 0..3 {
            for (i, &k) in labels.data().iter().enumerate() {
                if k == 2 {
                    sum += (x.tensor().data()[c * hw + i] + 1.0) * 0.5;
                    n += 1;
                }
            }
        }
    }
    assert!(n > 1000, "scene has too little sky");
    let floor = params.noise / (2.0 * std::f64::consts::PI).sqrt();
    assert!((sum / n as f64 - floor).abs() < 1e-3, "{} vs {floor}", sum / n as f64);
}

#[test]
fn agreement_falls_with_shift() {
    let opts = SceneOptions {
        resample_dynamic: false,
        ..SceneOptions::default()
    };
    let shifts = [0.0, 2.0, 4.0, 8.0, 12.0, 20.0];
    let mut means = vec![0.0; shifts.len()];
    for seed in 0..50 {
        let base = SceneSpec::random(split_seed(9, "train", seed), &opts).unwrap();
        for (m, &d) in means.iter_mut().zip(&shifts) {
            let spec = SceneSpec {
                pose_shift: PoseShift {
                    dx: d,
                    dy: -d / 2.0,
                    dtheta: 0.0,
                },
                ..base.clone()
            };
            let out = synth_sample(&spec).unwrap();
            *m += label_agreement(&out.y_night, &out.y_day_ref) / 50.0;
        }
    }
    assert!((means[0] - 1.0).abs() < 1e-12);
    for w in means.windows(2) {
        assert!(w[1] < w[0], "agreement not decreasing: {means:?}");
    }
}

#[test]
fn resampled_dynamics_keep_static_pixels_aligned_at_zero_shift() {
    let opts = SceneOptions::default();
    let tax = ClassTaxonomy::synthetic();
    for seed in 0..10 {
        let spec = SceneSpec {
            pose_shift: PoseShift::default(),
            ..SceneSpec::random(seed, &opts).unwrap()
        };
        let out = synth_sample(&spec).unwrap();
        for (&a, &b) in out.y_night.data().iter().zip(out.y_day_ref.data()) {
            if tax.is_static(a as usize) && tax.is_static(b as usize) {
                assert_eq!(a, b);
            }
        }
    }
}

#[test]
fn shift_beyond_a_quarter_width_is_a_range_error() {
    let mut spec = SceneSpec::random(1, &SceneOptions::default()).unwrap();
    spec.pose_shift.dy = 33.0;
    assert!(matches!(synth_sample(&spec), Err(Error::Range(_))));
    spec.pose_shift = PoseShift {
        dtheta: 11.0,
        ..PoseShift::default()
    };
    assert!(matches!(synth_sample(&spec), Err(Error::Range(_))));
}

#[test]
fn emitted_images_respect_the_image_contract() {
    for s in small(5, 5, "train") {
        for x in [&s.sample.x_day, &s.sample.x_night, &s.sample.x_day_ref] {
            assert!(x.tensor().data().iter().all(|v| v.abs() <= 1.0));
            assert_eq!((x.height() % 8, x.width() % 8), (0, 0));
        }
    }
}

#[test]
fn export_then_load_round_trips() {
    let tax = ClassTaxonomy::synthetic();
    let dir = tempfile::tempdir().unwrap();
    let train = small(3, 6, "train");
    let val = small(2, 6, "val");
    export_split(dir.path(), "train", &train).unwrap();
    export_split(dir.path(), "val", &val).unwrap();

    let loaded = load_split(dir.path(), "train", &tax).unwrap();
    for (s, l) in train.iter().zip(&loaded) {
        let expect = StoredSample::from_synth(s, false);
        assert_eq!(l.id, expect.id);
        assert_eq!(l.x_day, expect.x_day);
        assert_eq!(l.x_night, expect.x_night);
        assert_eq!(l.x_day_ref, expect.x_day_ref);
        assert_eq!(l.y_day, expect.y_day);
        assert!(l.y_night.is_none());
    }
    let v = load_split(dir.path(), "val", &tax).unwrap();
    assert_eq!(v[1].y_night.as_ref(), Some(&val[1].y_night));
    for d in ["day", "day_label", "night", "day_ref", "night_label"] {
        assert!(dir.path().join("val").join(d).is_dir(), "missing {d}");
    }

    // the manifest refuses to point at missing files
    let m = DatasetManifest::load(dir.path(), "train").unwrap();
    fs::remove_file(dir.path().join(&m.samples[0].x_night)).unwrap();
    assert!(load_split(dir.path(), "train", &tax).is_err());
}

#[test]
fn cityscapes_empty_root() {
    let dir = tempfile::tempdir().unwrap();
    let m = load_cityscapes_tree(dir.path()).unwrap();
    assert!(m.entries.is_empty() && m.skipped.is_empty());
}

#[test]
fn cityscapes_image_without_label_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let samples = small(2, 7, "train");
    export_cityscapes(dir.path(), "train", &samples).unwrap();
    let id = &samples[0].sample.sample_id;
    fs::remove_file(
        dir.path()
            .join("gtFine/train/synth")
            .join(format!("synth_{id}_gtFine_labelIds.png")),
    )
    .unwrap();
    let m = load_cityscapes_tree(dir.path()).unwrap();
    assert_eq!(m.entries.len(), 1);
    assert_eq!(m.skipped.len(), 1);
}

#[test]
fn cityscapes_export_reingests() {
    let tax = ClassTaxonomy::synthetic();
    let dir = tempfile::tempdir().unwrap();
    let samples = small(3, 8, "val");
    export_cityscapes(dir.path(), "val", &samples).unwrap();
    let m = load_cityscapes_tree(dir.path()).unwrap();
    assert_eq!(m.entries.len(), 3);
    assert!(m.skipped.is_empty());
    assert_eq!(load_cityscapes_tree(dir.path()).unwrap(), m);
    let map = identity_id_map(&tax);
    for (e, s) in m.entries.iter().zip(&samples) {
        assert_eq!(e.id, format!("synth_{}", s.sample.sample_id));
        let l = load_cityscapes_labels(&dir.path().join(&e.label), &map, &tax).unwrap();
        assert_eq!(l, s.sample.y_day);
        let x = io::load_image(&dir.path().join(&e.image), nightseg_core::Domain::Day).unwrap();
        assert_eq!(io::image_to_rgb8(&x), io::image_to_rgb8(&s.sample.x_day));
    }
}

#[test]
fn cityscapes_unknown_ids_become_ignore() {
    let tax = ClassTaxonomy::synthetic();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("l.png");
    io::save_labels(&p, &LabelMap::new(1, 4, vec![0, 7, 26, 200]).unwrap()).unwrap();
    let map = [(7u8, 0u8), (26, 7), (200, 42)].into_iter().collect();
    let l = load_cityscapes_labels(&p, &map, &tax).unwrap();
    assert_eq!(l.data(), &[255, 0, 7, 255]);
}
