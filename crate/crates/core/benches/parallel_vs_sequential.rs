//! Hot paths under the rayon backend (default) and the sequential fallback:
//!
//!     cargo bench -p urank
//!     cargo bench -p urank --no-default-features
//!
//! Benchmark ids carry the active mode, so both runs land side by side in
//! criterion's report directory.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use urank::baselines::rank_km;
use urank::click::{simulate_sessions, LoggingPolicy, OracleClickModel};
use urank::ctr::{click_examples, ctr_loss_and_grad, Architecture, CtrModel};
use urank::data::{generate_synthetic, Dataset, SyntheticConfig};
use urank::eval::oracle_utility;
use urank::par;
use urank::ranker::{
    build_utility_tables, pairwise_objective, positions_from_order, rank, urank_pairs, ScoringModel,
};

fn mode() -> &'static str {
    if par::is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

fn fixture() -> (Dataset, OracleClickModel) {
    let ds = generate_synthetic(
        &SyntheticConfig {
            n_queries: 500,
            n_docs: 10,
            feature_dim: 20,
            y_max: 4,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    let o = OracleClickModel::sample(20, 1.0, 0.1, 4, 10, 2).unwrap();
    (ds, o)
}

fn benches(c: &mut Criterion) {
    let (ds, o) = fixture();
    let sessions = simulate_sessions(&o, &LoggingPolicy::RandomShuffle, &ds, 20, 3).unwrap();
    let m = mode();

    c.bench_function(&format!("simulate_sessions/{m}"), |b| {
        b.iter(|| {
            simulate_sessions(&o, &LoggingPolicy::RandomShuffle, black_box(&ds), 20, 3).unwrap()
        })
    });

    let ctr = CtrModel::new(Architecture::A1, 20, 10, &[64, 32], 4);
    let examples = click_examples(&sessions, &ds).unwrap();
    c.bench_function(&format!("ctr_loss_and_grad/{m}"), |b| {
        b.iter(|| ctr_loss_and_grad(black_box(&ctr), &examples))
    });

    c.bench_function(&format!("build_utility_tables/{m}"), |b| {
        b.iter(|| build_utility_tables(black_box(&sessions), &o, &ds, 10).unwrap())
    });

    let tables = build_utility_tables(&sessions, &o, &ds, 10).unwrap();
    let scorer = ScoringModel::new(20, &[64, 32], 5.0, 1.0, 5);
    let pairs: Vec<_> = ds
        .queries
        .iter()
        .zip(&tables)
        .map(|(q, t)| urank_pairs(t, &positions_from_order(&rank(&scorer, q))))
        .collect();
    let queries: Vec<_> = ds.queries.iter().collect();
    let pair_refs: Vec<_> = pairs.iter().map(Vec::as_slice).collect();
    c.bench_function(&format!("pairwise_objective/{m}"), |b| {
        b.iter(|| pairwise_objective(black_box(&scorer), &queries, &pair_refs, 1.0))
    });

    let perms: Vec<_> = ds
        .queries
        .iter()
        .map(|q| rank_km(&o, q, 10).unwrap())
        .collect();
    c.bench_function(&format!("oracle_utility/{m}"), |b| {
        b.iter(|| oracle_utility(&o, black_box(&ds), &perms).unwrap())
    });
}

criterion_group! {
    name = group;
    config = Criterion::default().sample_size(10);
    targets = benches
}
criterion_main!(group);
