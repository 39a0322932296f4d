use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hetero_moe::cost::Profiles;
use hetero_moe::exec::Exec;
use hetero_moe::model::{HardwareSpec, ModelSpec};
use hetero_moe::scheduler::Policy;
use hetero_moe::sim::{compare, simulate, SimConfig};
use hetero_moe::trace::{generate_trace_with, SkewProfile};

fn modes() -> [(&'static str, Exec); 2] {
    [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)]
}

fn bench(c: &mut Criterion) {
    let mut m = ModelSpec::deepseek_v2();
    m.num_layers = 16;
    let hw = HardwareSpec::reference_for(&m);
    let prof = Profiles::analytic(&hw);
    let trace = generate_trace_with(Exec::Parallel, &m, 512, 8, &SkewProfile::DEEPSEEK_BATCH_512, 7);
    let cfg = SimConfig::default();

    let mut g = c.benchmark_group("generate_trace");
    g.sample_size(20);
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_trace_with(exec, &m, 512, 8, &SkewProfile::DEEPSEEK_BATCH_512, 7))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("simulate_tri_domain");
    g.sample_size(20);
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| simulate(&trace, &m, &hw, &prof, &cfg.with_policy(Policy::TriDomain), exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("compare_all_policies");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| compare(&trace, &m, &hw, &prof, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
