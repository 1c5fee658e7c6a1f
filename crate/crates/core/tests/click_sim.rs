use approx::assert_abs_diff_eq;

use urank::click::{
    rank_by_policy, read_sessions_jsonl, simulate_sessions, write_sessions_jsonl, LoggingPolicy,
    OracleClickModel,
};
use urank::data::{generate_synthetic, SyntheticConfig};

fn small() -> (urank::data::Dataset, OracleClickModel) {
    let ds = generate_synthetic(
        &SyntheticConfig {
            n_queries: 3,
            n_docs: 6,
            feature_dim: 5,
            y_max: 4,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    let o = OracleClickModel::sample(5, 1.0, 0.1, 4, 6, 2).unwrap();
    (ds, o)
}

#[test]
fn click_frequencies_match_model() {
    let (ds, o) = small();
    let policy = LoggingPolicy::RelevanceSorted;
    let n = 40_000;
    let sessions = simulate_sessions(&o, &policy, &ds, n, 3).unwrap();
    for (qi, q) in ds.queries.iter().enumerate() {
        let qs: Vec<_> = sessions
            .iter()
            .filter(|s| s.query_id == q.query_id)
            .collect();
        assert_eq!(qs.len(), n);
        let placement = &qs[0].placement;
        for (p, &item) in placement.iter().enumerate() {
            let it = &q.items[item];
            let expected = o.click_prob(&it.features, it.relevance, p + 1).unwrap();
            let observed = qs.iter().filter(|s| s.clicks[p]).count() as f64 / n as f64;
            let se = (expected * (1.0 - expected) / n as f64).sqrt();
            assert!(
                (observed - expected).abs() < 3.0 * se + 1e-12,
                "query {qi} position {}: observed {observed}, expected {expected}",
                p + 1
            );
        }
    }
}

#[test]
fn sessions_round_trip_and_are_deterministic() {
    let (ds, o) = small();
    let a = simulate_sessions(&o, &LoggingPolicy::RandomShuffle, &ds, 50, 4).unwrap();
    let b = simulate_sessions(&o, &LoggingPolicy::RandomShuffle, &ds, 50, 4).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    write_sessions_jsonl(&a, &path).unwrap();
    assert_eq!(read_sessions_jsonl(&path).unwrap(), a);
    let c = simulate_sessions(&o, &LoggingPolicy::RandomShuffle, &ds, 50, 5).unwrap();
    assert_ne!(a, c);
}

#[test]
fn random_shuffle_covers_positions_uniformly() {
    let (ds, _) = small();
    let q = &ds.queries[0];
    let n = q.items.len();
    let trials = 6000;
    let mut first = vec![0usize; n];
    for s in 0..trials {
        first[rank_by_policy(&LoggingPolicy::RandomShuffle, q, s as u64)[0]] += 1;
    }
    for c in first {
        assert_abs_diff_eq!(c as f64 / trials as f64, 1.0 / n as f64, epsilon = 0.03);
    }
}

#[test]
fn placements_truncate_at_k_max() {
    let (ds, _) = small();
    let o = OracleClickModel::sample(5, 1.0, 0.1, 4, 3, 2).unwrap();
    let sessions = simulate_sessions(&o, &LoggingPolicy::RelevanceSorted, &ds, 5, 1).unwrap();
    assert!(sessions
        .iter()
        .all(|s| s.placement.len() == 3 && s.clicks.len() == 3));
}
