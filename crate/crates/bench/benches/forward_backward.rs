use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nightseg_core::nets::ArchConfig;
use nightseg_core::trainer::{Batch, TrainConfig, Trainer};
use nightseg_core::types::{ClassTaxonomy, Domain, Image, LabelMap, PairedSample};
use nightseg_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(n: usize, size: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut image = |d| {
        let data = (0..3 * size * size).map(|_| rng.random_range(-0.9..0.9)).collect();
        Image::new(Tensor::new(vec![1, 3, size, size], data), d).unwrap()
    };
    let samples: Vec<PairedSample> = (0..n)
        .map(|i| {
            let labels = LabelMap::new(size, size, (0..size * size).map(|p| (p % 9) as u8).collect()).unwrap();
            PairedSample::new(format!("b{i}"), image(Domain::Day), labels, image(Domain::Night), image(Domain::DayRef)).unwrap()
        })
        .collect();
    Batch::from_samples(&samples).unwrap()
}

fn trainer(source_only: bool) -> Trainer {
    let mut cfg = TrainConfig {
        arch: ArchConfig::desk(9),
        ..TrainConfig::default()
    };
    cfg.ablation.source_only = source_only;
    Trainer::new(cfg, ClassTaxonomy::synthetic()).unwrap()
}

fn steps(c: &mut Criterion) {
    let mut g = c.benchmark_group("warmup_step");
    g.sample_size(10);
    for size in [32, 64] {
        let b = batch(2, size);
        let mut t = trainer(false);
        g.bench_with_input(BenchmarkId::new("loops", size), &b, |bench, b| bench.iter(|| t.warmup_step(b).unwrap()));
        let mut s = trainer(true);
        g.bench_with_input(BenchmarkId::new("source_only", size), &b, |bench, b| bench.iter(|| s.warmup_step(b).unwrap()));
    }
    g.finish();
}

fn inference(c: &mut Criterion) {
    let t = trainer(false);
    let x = batch(1, 128).x_night;
    c.bench_function("predict_128", |bench| bench.iter(|| t.bundle.predict_batch(&x)));
}

criterion_group!(benches, steps, inference);
criterion_main!(benches);
