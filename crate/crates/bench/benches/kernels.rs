use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparselora::linalg::ScoreGranularity;
use sparselora::sparse_exec::{main_linear, Slice};
use sparselora::sparsity::random_scores;
use sparselora::{select_mask, svd_topk, Group, ModelConfig, SparsityPlan, Tape, Tensor};
use sparselora_bench::StepFixture;

fn sliced_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Arc::new(Tensor::<f32>::randn(&[512, 256], 1.0, &mut rng));
    let w = Arc::new(Tensor::<f32>::randn(&[256, 1024], 0.02, &mut rng));
    let mut g = c.benchmark_group("main_linear_256x1024");
    for sparsity in [0.0, 0.5, 0.9] {
        let s = random_scores(1024, ScoreGranularity::Channel, &mut rng);
        let m = select_mask(&s, sparsity, 1024, Group::FfnIntermediate).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(sparsity), &m, |b, m| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.constant(Arc::clone(&x));
                let slice = if sparsity == 0.0 { Slice::Dense } else { Slice::Out(m) };
                black_box(main_linear(&mut tape, xv, &w, slice, None, None).unwrap());
            })
        });
    }
    g.finish();
}

fn truncated_svd(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = Tensor::<f64>::randn(&[64, 256], 0.02, &mut rng);
    c.bench_function("svd_topk_64x256_k8", |b| b.iter(|| black_box(svd_topk(&w, 8, "bench").unwrap())));
}

fn train_step(c: &mut Criterion) {
    let fx = StepFixture::new(&ModelConfig::default(), 8, 64, 8);
    let n = fx.model.cfg.n_layers;
    let mut plan = SparsityPlan::uniform(n, 0.9, 0.5);
    plan.layers.remove(&0);
    plan.estimator_rank = 8;
    let mut g = c.benchmark_group("train_step_default");
    g.sample_size(10);
    g.bench_function("dense", |b| b.iter(|| black_box(fx.step(None))));
    g.bench_function("sparse", |b| b.iter(|| black_box(fx.step(Some(&plan)))));
    g.finish();
}

criterion_group!(benches, sliced_matmul, truncated_svd, train_step);
criterion_main!(benches);
