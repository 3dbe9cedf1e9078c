use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nestnet::{
    gen_spiral, matmul, orthogonalize, per_task_gradients, train_step, NestedNetwork, NestingMode,
    OptimizerConfig, OptimizerState, PriorityOrder, StagePlan, Strategy, Tensor,
};

fn filled(rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.5).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let (a, b) = (filled(64, n), filled(n, n));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn batch() -> (Tensor, Vec<usize>) {
    let data = gen_spiral(0, 64, 3, 0.15).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    data.batch(&idx)
}

fn bench_forward_backward(c: &mut Criterion) {
    let (x, y) = batch();
    let mut g = c.benchmark_group("forward_backward");
    for mode in [NestingMode::Width, NestingMode::Depth, NestingMode::WidthDepthSimultaneous] {
        let net = NestedNetwork::build(&StagePlan::new(mode, 4, 8, 2, 3, 2), 0).unwrap();
        g.bench_function(mode.name(), |bench| bench.iter(|| per_task_gradients(&net, black_box(&x), &y).unwrap()));
    }
    g.finish();
}

fn bench_orthogonalize(c: &mut Criterion) {
    let (x, y) = batch();
    let net = NestedNetwork::build(&StagePlan::new(NestingMode::Width, 4, 8, 2, 3, 2), 0).unwrap();
    let (_, grads) = per_task_gradients(&net, &x, &y).unwrap();
    let order = PriorityOrder::identity(4);
    c.bench_function("orthogonalize/4-stage", |bench| {
        bench.iter(|| orthogonalize(black_box(&grads), &order, 1e-12).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let (x, y) = batch();
    let mut g = c.benchmark_group("train_step");
    for strategy in [Strategy::Sgd, Strategy::NormSgd, Strategy::Osgd, Strategy::OsgdNorm] {
        let mut net = NestedNetwork::build(&StagePlan::new(NestingMode::Width, 4, 8, 2, 3, 2), 0).unwrap();
        let config = OptimizerConfig::with_strategy(strategy);
        let mut state = OptimizerState::default();
        g.bench_function(strategy.name(), |bench| {
            bench.iter(|| train_step(&mut net, black_box(&x), &y, &config, 1e-4, &mut state).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_forward_backward, bench_orthogonalize, bench_train_step);
criterion_main!(benches);
