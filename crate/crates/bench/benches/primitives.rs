use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use prelu_extract::critical_search::second_directional_derivative;
use prelu_extract::evaluation::align;
use prelu_extract::prefix::RecoveredPrefix;
use prelu_extract::scores_adapter::ScalarView;
use prelu_extract::weight_recovery::{probe_directions, resolve_projection_signs, solve_neuron};
use prelu_extract::{extract, AttackConfig, ProbeConfig, Workflow};
use prelu_extract_bench::{critical_point, network, raw_oracle};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn forward(c: &mut Criterion) {
    let net = network(&[196, 50, 50, 1], 1);
    let x = vec![0.1; 196];
    c.bench_function("eval 196-50-50-1", |b| b.iter(|| net.eval(black_box(&x))));
}

fn probing(c: &mut Criterion) {
    let net = network(&[32, 16, 1], 1);
    let oracle = raw_oracle(&net);
    let f = ScalarView::default_for(&oracle, 0);
    let x = critical_point(&net, 0);
    let h = vec![1.0 / (32f64).sqrt(); 32];
    c.bench_function("second difference d=32", |b| {
        b.iter(|| second_directional_derivative(&f, black_box(&x), &h, 1e-4, None).unwrap())
    });
    let prefix = RecoveredPrefix::new(32);
    let cfg = ProbeConfig::default();
    c.bench_function("probe + solve neuron d=32", |b| {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        b.iter(|| {
            let p = probe_directions(&f, &prefix, &x, &cfg, &mut rng).unwrap();
            let signs = resolve_projection_signs(&p).unwrap();
            solve_neuron(&p, &signs, 1).unwrap()
        })
    });
}

fn alignment(c: &mut Criterion) {
    let net = network(&[64, 32, 32, 1], 2);
    let twin = net.permute_layer(1, &(0..32).rev().collect::<Vec<_>>()).unwrap();
    c.bench_function("align 64-32-32-1", |b| b.iter(|| align(&net, black_box(&twin)).unwrap()));
}

fn end_to_end(c: &mut Criterion) {
    let mut group = c.benchmark_group("extract");
    group.sample_size(10);
    for (name, dims) in [("8-4-1", vec![8, 4, 1]), ("12-6-4-1", vec![12, 6, 4, 1])] {
        let net = network(&dims, 3);
        for workflow in [Workflow::Independent, Workflow::Joint] {
            let cfg = AttackConfig { workflow, seed: 3, ..Default::default() };
            group.bench_function(format!("{name} workflow {}", workflow.id()), |b| {
                b.iter(|| extract(&raw_oracle(&net), &dims, &cfg).unwrap().total_queries)
            });
        }
    }
    group.finish();
}

criterion_group!(benches, forward, probing, alignment, end_to_end);
criterion_main!(benches);
