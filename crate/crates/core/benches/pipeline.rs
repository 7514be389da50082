use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sae_core::exec::Execution;
use sae_core::inference::{sample_posterior, SamplerConfig};
use sae_core::poststrat::poststratify_posterior;
use sae_core::validate::{simulate, ScenarioConfig, SyntheticScenario};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench(c: &mut Criterion) {
    let scenario = SyntheticScenario::generate(&ScenarioConfig { movers: 1500, seed: 1, ..Default::default() }).unwrap();
    let data = simulate(&scenario).unwrap();
    let config = |execution| SamplerConfig { chains: 4, warmup: 100, draws: 250, thin: 1, seed: 1, execution };
    let posterior = sample_posterior(&scenario.spec, &data.movers, &config(Execution::Sequential)).unwrap();

    let mut g = c.benchmark_group("poststratify");
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| poststratify_posterior(black_box(&posterior), &data.poststrat, None, mode).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("sample_chains");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| sample_posterior(&scenario.spec, black_box(&data.movers), &config(mode)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
