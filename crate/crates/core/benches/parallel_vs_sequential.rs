use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pah_core::eval::{evaluate_descriptors, EvalOptions, ItemMeta, Scenario};
use pah_core::model::{ModelInput, PahModel};
use pah_core::{Exec, ModelConfig, Tensor};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn inputs(n: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<ModelInput> {
    (0..n)
        .map(|_| {
            let len = cfg.input_h * cfg.input_w * 3;
            let px = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
            ModelInput::new(Tensor::new(&[cfg.input_h, cfg.input_w, 3], px).unwrap(), None).unwrap()
        })
        .collect()
}

fn train_step(c: &mut Criterion) {
    let cfg = ModelConfig {
        num_classes: 6,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = PahModel::new(cfg.clone()).unwrap();
    let batch = inputs(12, &cfg, &mut rng);
    let labels: Vec<usize> = (0..12).map(|i| i / 2).collect();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            let mut m = model.clone();
            b.iter(|| m.train_step(&batch, &labels, None, exec).unwrap())
        });
    }
    group.finish();
}

fn descriptors(c: &mut Criterion) {
    let cfg = ModelConfig {
        num_classes: 6,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = PahModel::new(cfg.clone()).unwrap();
    let images = inputs(16, &cfg, &mut rng);
    let mut group = c.benchmark_group("descriptors");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| model.descriptors(&images, exec).unwrap())
        });
    }
    group.finish();
}

fn ranking(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dim = 480;
    let mut make = |n: usize| -> (Vec<Vec<f64>>, Vec<ItemMeta>) {
        let d = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let m = (0..n)
            .map(|i| ItemMeta {
                identity: i % 50,
                clothes_id: i % 3,
                camera_id: 0,
                sample_id: i,
            })
            .collect();
        (d, m)
    };
    let (qd, qm) = make(200);
    let (gd, gm) = make(1000);
    let mut group = c.benchmark_group("ranking");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_descriptors(&qd, &qm, &gd, &gm, Scenario::General, EvalOptions::default(), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, train_step, descriptors, ranking);
criterion_main!(benches);
