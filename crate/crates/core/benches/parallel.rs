// Sequential vs rayon execution of the two hot loops: batched evaluation and
// one training epoch. Both paths produce identical numbers; only the wall
// clock differs. On a single core the two should be within noise.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use plora_core::data::{generate, Corpus, GeneratorSpec, SplitSpec};
use plora_core::encoder::{EncoderConfig, EncoderModel};
use plora_core::trainer::{evaluate, train_fullshot, EvalMode, Regime, RunConfig};
use plora_core::users::UserRegistry;
use plora_core::Exec;

fn corpus() -> Corpus {
    let split = SplitSpec {
        n_users_a: 10,
        n_users_b: 2,
        samples_per_user_a: 40,
        samples_per_user_b: 20,
        min_class_frac: 0.0,
        seed: 1,
        ..SplitSpec::default()
    };
    generate(&GeneratorSpec::default(), &split).unwrap()
}

fn trained(c: &Corpus) -> (EncoderModel, UserRegistry) {
    let cfg = RunConfig {
        epochs: 1,
        ..RunConfig::default()
    };
    let mut model = EncoderModel::new(EncoderConfig::default(), 1).unwrap();
    let mut reg = UserRegistry::new(model.config().plora.d_p);
    train_fullshot(&mut model, &mut reg, &c.a.train, &c.a.dev, &cfg).unwrap();
    (model, reg)
}

fn modes() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn bench_evaluate(c: &mut Criterion) {
    let data = corpus();
    let (model, reg) = trained(&data);
    let mut group = c.benchmark_group("evaluate");
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                evaluate(&model, &reg, &data.a.train, &EvalMode::Personalized, Regime::FullShot, exec).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_epoch(c: &mut Criterion) {
    let data = corpus();
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for (name, exec) in modes() {
        let cfg = RunConfig {
            epochs: 1,
            exec,
            ..RunConfig::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| {
                let mut model = EncoderModel::new(EncoderConfig::default(), 1).unwrap();
                let mut reg = UserRegistry::new(model.config().plora.d_p);
                train_fullshot(&mut model, &mut reg, &data.a.train, &data.a.dev, cfg).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_evaluate, bench_epoch);
criterion_main!(benches);
