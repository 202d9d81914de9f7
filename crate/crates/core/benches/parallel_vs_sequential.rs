use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ubalance_core::safety::{predict_all, train_safety, Fusion, SafetyConfig, SafetyTrainOptions};
use ubalance_core::synthgen::{build_benchmark, GenConfig};
use ubalance_core::uncertainty::features_of;
use ubalance_core::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn compare(c: &mut Criterion) {
    let gen = GenConfig { n_flights: 40, ..GenConfig::default() };
    let split = build_benchmark(&gen, Exec::Parallel).expect("benchmark").1.split;
    let config = SafetyConfig { hidden_dim: 8, layers: 1, head_dim: 16, epochs: 1, batch_size: 32, ..SafetyConfig::default() };
    let opts = |exec| SafetyTrainOptions { fusion: Fusion::Plain, class_weights: (1.0, 1.0), seed: 1, exec };
    let (model, _) = train_safety(&split.train, &split.validation, None, None, &config, &opts(Exec::Parallel)).unwrap();

    let mut g = c.benchmark_group("features");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| features_of(&split.train, exec).unwrap()));
    }
    g.finish();

    let mut g = c.benchmark_group("safety_predict");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| predict_all(&model, &split.test, None, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("safety_epoch");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| train_safety(&split.train, &split.validation, None, None, &config, &opts(exec)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, compare);
criterion_main!(benches);
