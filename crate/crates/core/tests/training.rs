use urank::baselines::{rank_ctr_at_1, rank_km, train_ips_lambdarank, train_naive_lambdarank};
use urank::click::{simulate_sessions, LoggingPolicy, OracleClickModel};
use urank::ctr::{auc, train_ctr, Architecture, CtrModel, CtrTrainConfig};
use urank::data::{generate_synthetic, Dataset, SyntheticConfig};
use urank::eval::oracle_utility;
use urank::ranker::{
    build_utility_tables, rank, train_urank, train_urank_on_tables, ScoringModel, UrankTrainConfig,
};

fn setup(
    n_queries: usize,
    spq: usize,
) -> (Dataset, OracleClickModel, Vec<urank::click::ClickSession>) {
    let ds = generate_synthetic(
        &SyntheticConfig {
            n_queries,
            n_docs: 8,
            feature_dim: 6,
            y_max: 4,
            ..Default::default()
        },
        11,
    )
    .unwrap();
    let o = OracleClickModel::sample(6, 1.0, 0.1, 4, 8, 12).unwrap();
    let s = simulate_sessions(&o, &LoggingPolicy::RandomShuffle, &ds, spq, 13).unwrap();
    (ds, o, s)
}

fn quick() -> UrankTrainConfig {
    UrankTrainConfig {
        epochs: 8,
        hidden_sizes: vec![16],
        ..Default::default()
    }
}

#[test]
fn ctr_training_improves_auc_and_round_trips() {
    let (ds, _, sessions) = setup(120, 10);
    for arch in [Architecture::A1, Architecture::A2] {
        let cfg = CtrTrainConfig {
            architecture: arch,
            hidden_sizes: vec![16],
            epochs: 8,
            ..Default::default()
        };
        let (model, report) = train_ctr(&sessions, &ds, &cfg).unwrap();
        let first = report.epochs[0].train_auc.unwrap();
        let last = report.epochs.last().unwrap().train_auc.unwrap();
        assert!(last > first && last > 0.7, "{arch}: AUC {first} -> {last}");
        assert!(report.epochs.windows(2).any(|w| w[1].loss < w[0].loss));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ctr.json");
        model.save(&path).unwrap();
        let back = CtrModel::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(
            auc(&back, &sessions, &ds).unwrap(),
            auc(&model, &sessions, &ds).unwrap()
        );
    }
}

#[test]
fn ctr_training_rejects_bad_config() {
    let (ds, _, sessions) = setup(5, 2);
    let cfg = CtrTrainConfig {
        learning_rate: -1.0,
        ..Default::default()
    };
    assert!(train_ctr(&sessions, &ds, &cfg).is_err());
}

#[test]
fn urank_on_oracle_tables_beats_random_init() {
    let (ds, o, sessions) = setup(150, 20);
    let tables = build_utility_tables(&sessions, &o, &ds, o.k_max).unwrap();
    let init = ScoringModel::new(6, &[16], 5.0, 1.0, 0);
    let init_perms: Vec<_> = ds.queries.iter().map(|q| rank(&init, q)).collect();
    let (model, report) = train_urank_on_tables(&ds, &tables, &quick()).unwrap();
    let perms: Vec<_> = ds.queries.iter().map(|q| rank(&model, q)).collect();
    let before = oracle_utility(&o, &ds, &init_perms)
        .unwrap()
        .clicks_per_query;
    let after = oracle_utility(&o, &ds, &perms).unwrap().clicks_per_query;
    let km: Vec<_> = ds
        .queries
        .iter()
        .map(|q| rank_km(&o, q, o.k_max).unwrap())
        .collect();
    let best = oracle_utility(&o, &ds, &km).unwrap().clicks_per_query;
    assert!(after > before, "{before} -> {after}");
    assert!(after <= best + 1e-12);
    assert_eq!(report.epochs.len(), 9);
    let u0 = report.epochs[0].estimated_utility.unwrap();
    let u_end = report.epochs.last().unwrap().estimated_utility.unwrap();
    assert!(u_end > u0);
}

#[test]
fn baselines_train_and_rank() {
    let (ds, o, sessions) = setup(80, 10);
    let (naive, r1) = train_naive_lambdarank(&sessions, &ds, &quick()).unwrap();
    let (ips, r2) = train_ips_lambdarank(&sessions, &ds, &o, &quick()).unwrap();
    assert_eq!(r1.method, "naive_lambdarank");
    assert_eq!(r2.method, "ips_lambdarank_groundtruth");
    for q in &ds.queries {
        let mut a = rank(&naive, q);
        let mut b = rank(&ips, q);
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, (0..q.items.len()).collect::<Vec<_>>());
        assert_eq!(a, b);
    }
}

#[test]
fn urank_with_learned_ctr_runs_end_to_end() {
    let (ds, o, sessions) = setup(80, 10);
    let (ctr, _) = train_ctr(
        &sessions,
        &ds,
        &CtrTrainConfig {
            hidden_sizes: vec![16],
            epochs: 4,
            ..Default::default()
        },
    )
    .unwrap();
    let (model, _) = train_urank(&ds, &sessions, &ctr, o.k_max, &quick()).unwrap();
    let perms: Vec<_> = ds.queries.iter().map(|q| rank(&model, q)).collect();
    let ctr1: Vec<_> = ds
        .queries
        .iter()
        .map(|q| rank_ctr_at_1(&ctr, q).unwrap())
        .collect();
    for p in perms.iter().chain(&ctr1) {
        assert_eq!(p.len(), 8);
    }
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path().join("r.json"), "u_rank").unwrap();
    let (back, method) = ScoringModel::load(dir.path().join("r.json")).unwrap();
    assert_eq!(method, "u_rank");
    assert_eq!(back, model);
}
