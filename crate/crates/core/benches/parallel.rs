// rayon vs sequential on the three hot paths: a training step, k-NN and uniformity.
// Build with --no-default-features to compare against a binary with no rayon at all.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdssl::config::ExperimentConfig;
use sdssl::data::synthetic::{generate, SyntheticConfig};
use sdssl::data::Split;
use sdssl::eval::knn::knn_predict;
use sdssl::eval::metrics::uniformity;
use sdssl::eval::FeatureBank;
use sdssl::exec;
use sdssl::train::{train_step, TrainerState};

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn random_mat(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn bank(n: usize, d: usize, seed: u64, split: Split) -> FeatureBank {
    let labels = (0..n as u32).map(|i| i % 10).collect();
    FeatureBank::new(random_mat(n, d, seed), labels, 10, 1, split).unwrap()
}

fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.encoder.num_layers = 4;
    c.encoder.embed_dim = 32;
    c.encoder.num_heads = 2;
    c.encoder.patch_size = 4;
    c.encoder.image_size = 16;
    c.heads.out_dim = 32;
    c.heads.hidden_last_projector = 64;
    c.heads.hidden_intermediate_projector = 64;
    c.heads.hidden_predictor = 64;
    c.data.recipe.output_size = 16;
    c.data.batch_size = 32;
    c.data.synthetic = SyntheticConfig {
        num_samples: 64,
        num_classes: 10,
        size: 16,
        seed: 0,
    };
    c.sdssl_enabled = true;
    c
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = small_config();
    let ds = generate(&cfg.data.synthetic, Split::Train);
    let idx: Vec<usize> = (0..cfg.data.batch_size).collect();
    let (a, b) = ds.view_batches(&idx, &cfg.data.recipe, 0, 0).unwrap();
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for (name, on) in MODES {
        exec::set_parallel(on);
        let mut state = TrainerState::new(cfg.clone(), 1000).unwrap();
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| train_step(&mut state, (&a, &b)).unwrap())
        });
    }
    g.finish();
}

fn bench_knn(c: &mut Criterion) {
    let train = bank(4000, 64, 1, Split::Train).normalized();
    let test = bank(1000, 64, 2, Split::Test).normalized();
    let mut g = c.benchmark_group("knn");
    g.sample_size(10);
    for (name, on) in MODES {
        exec::set_parallel(on);
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| knn_predict(&train, &test, 20, 0.07).unwrap())
        });
    }
    g.finish();
}

fn bench_uniformity(c: &mut Criterion) {
    let f = sdssl::eval::l2_normalize(&random_mat(2000, 64, 3));
    let mut g = c.benchmark_group("uniformity");
    g.sample_size(10);
    for (name, on) in MODES {
        exec::set_parallel(on);
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| uniformity(&f, 2.0).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_train_step, bench_knn, bench_uniformity);
criterion_main!(benches);
