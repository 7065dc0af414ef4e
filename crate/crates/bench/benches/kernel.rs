use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use fedunlearn_bench::{fixture, perturbation};
use fedunlearn_core::federation::server::ClientUpdate;
use fedunlearn_core::param_space::Owner;
use fedunlearn_core::{combine, Regime, ServerState, TaskVector};

fn model_kernels(c: &mut Criterion) {
    let f = fixture(32);
    let tau = perturbation(&f.theta, 1e-3);
    c.bench_function("forward/b32", |b| b.iter(|| f.model.forward(black_box(&f.theta), &f.batch).unwrap()));
    c.bench_function("loss_and_grad/b32", |b| {
        b.iter(|| f.model.loss_and_grad(black_box(&f.theta), &f.batch).unwrap())
    });
    c.bench_function("jvp/b32", |b| b.iter(|| f.model.jvp(black_box(&f.theta), &tau, &f.batch).unwrap()));
    c.bench_function("linearized_loss_and_grad/b32", |b| {
        b.iter(|| f.model.linearized_loss_and_grad(black_box(&f.theta), &tau, &f.batch).unwrap())
    });
    let small = fixture(4);
    c.bench_function("jacobian_at/b4", |b| {
        b.iter(|| small.model.jacobian_at(black_box(&small.theta), &small.batch).unwrap())
    });
}

fn arithmetic(c: &mut Criterion) {
    let f = fixture(10);
    let taus: Vec<TaskVector> = (1..=5)
        .map(|k| TaskVector::new(perturbation(&f.theta, 1e-3 * k as f64), Owner::Client(k), Regime::Ntk, false))
        .collect();
    let terms: Vec<(f64, &TaskVector)> = taus.iter().map(|t| (0.2, t)).collect();
    c.bench_function("combine/5_terms", |b| b.iter(|| combine(black_box(&f.theta), &terms).unwrap()));
    let updates: Vec<ClientUpdate> = taus
        .iter()
        .enumerate()
        .map(|(k, t)| ClientUpdate {
            client: k,
            tau: t.clone(),
            sample_count: 10 + k,
        })
        .collect();
    c.bench_function("aggregate/5_clients", |b| {
        b.iter(|| {
            let mut server = ServerState::new(f.theta.clone());
            server.aggregate(black_box(&updates)).unwrap().clone()
        })
    });
}

criterion_group!(benches, model_kernels, arithmetic);
criterion_main!(benches);
