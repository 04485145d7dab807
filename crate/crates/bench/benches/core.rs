use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use fair_exit::data::generate_synthetic;
use fair_exit::fairness::mmd2;
use fair_exit::metrics::evaluate;
use fair_exit::{Aggregation, Dataset, KernelSpec, ModelConfig, MultiExitModel, Regularizer, SynthSpec, TrainConfig};

fn dataset(samples: usize) -> Dataset {
    generate_synthetic(&SynthSpec {
        samples,
        seed: 1,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn model(data: &Dataset) -> MultiExitModel {
    MultiExitModel::new(ModelConfig {
        input_dim: data.dim(),
        num_classes: data.num_classes(),
        seed: 1,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn forward(c: &mut Criterion) {
    let data = dataset(1024);
    let model = model(&data);
    c.bench_function("forward_all/1024", |b| b.iter(|| model.forward_all(black_box(data.features())).unwrap()));
}

fn joint_loss_gradient(c: &mut Criterion) {
    let data = dataset(256);
    let mut model = model(&data);
    let mut group = c.benchmark_group("loss_and_grad/256");
    for (name, reg) in [("none", Regularizer::None), ("mmd", Regularizer::Mmd), ("hsic", Regularizer::Hsic)] {
        let cfg = TrainConfig {
            regularizer: reg,
            ..TrainConfig::for_exits(model.config().num_internal_exits())
        };
        group.bench_function(name, |b| {
            b.iter(|| {
                model.params_mut().zero_grad();
                model
                    .loss_and_grad(data.features(), data.targets(), data.sensitive(), &cfg)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn mmd(c: &mut Criterion) {
    let mut group = c.benchmark_group("mmd2");
    for rows in [64, 256] {
        let data = dataset(2 * rows);
        let idx = |g: u8| -> Vec<usize> { (0..data.len()).filter(|&i| data.sensitive()[i] == g).collect() };
        let (x0, x1) = (data.features().select_rows(&idx(0)), data.features().select_rows(&idx(1)));
        for (name, kernel) in [("linear", KernelSpec::Linear), ("rbf_median", KernelSpec::default())] {
            group.bench_with_input(BenchmarkId::new(name, rows), &rows, |b, _| b.iter(|| mmd2(&x0, &x1, kernel).unwrap()));
        }
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let data = dataset(4000);
    let classes = data.num_classes();
    let preds: Vec<usize> = data.targets().iter().enumerate().map(|(i, &y)| if i % 5 == 0 { (y + 1) % classes } else { y }).collect();
    c.bench_function("evaluate/4000", |b| {
        b.iter(|| evaluate(black_box(&preds), data.targets(), data.sensitive(), classes, Aggregation::Mean).unwrap())
    });
}

criterion_group!(benches, forward, joint_loss_gradient, mmd, metrics);
criterion_main!(benches);
