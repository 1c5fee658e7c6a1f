use proptest::prelude::*;

use urank::click::OracleClickModel;
use urank::data::{parse_letor_str, to_letor_string, Dataset, Item, QueryGroup};
use urank::matching::{brute_force_match, km_match, WeightMatrix};
use urank::ranker::{positions_from_order, urank_loss, UtilityTable};

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    let item = (
        prop::collection::vec(0.0f64..10.0, 3),
        0u32..=4,
        prop_oneof![Just(1.0), 0.1f64..5.0],
    );
    prop::collection::vec(prop::collection::vec(item, 1..6), 1..5).prop_map(|qs| Dataset {
        feature_dim: 3,
        y_max: 4,
        queries: qs
            .into_iter()
            .enumerate()
            .map(|(qi, items)| QueryGroup {
                query_id: format!("q{qi}"),
                items: items
                    .into_iter()
                    .enumerate()
                    .map(|(i, (features, relevance, utility_value))| Item {
                        item_id: i,
                        features,
                        relevance,
                        utility_value,
                    })
                    .collect(),
            })
            .collect(),
    })
}

fn square_matrix(max_n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_n).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(0.0f64..1.0, n), n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn letor_round_trip(ds in dataset_strategy()) {
        let text = to_letor_string(&ds);
        let back = parse_letor_str(&text, "mem", 3, 4).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn attention_nonincreasing_in_position(x in prop::collection::vec(0.0f64..1.0, 6), seed in 0u64..1000) {
        let o = OracleClickModel::sample(6, 1.0, 0.1, 4, 10, seed).unwrap();
        let probs: Vec<f64> = (1..=10).map(|k| o.attention_prob(&x, k).unwrap()).collect();
        prop_assert!((probs[0] - 1.0).abs() < 1e-12);
        for w in probs.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn km_matches_brute_force(rows in square_matrix(6)) {
        let w = WeightMatrix::from_rows(rows).unwrap();
        let a = km_match(&w).unwrap().total_weight;
        let b = brute_force_match(&w).unwrap().total_weight;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn km_assignment_invariant_under_positive_scaling(rows in square_matrix(6), factor in 0.01f64..100.0) {
        let w = WeightMatrix::from_rows(rows).unwrap();
        let a = km_match(&w).unwrap();
        let b = km_match(&w.scaled(factor)).unwrap();
        prop_assert!((b.total_weight - factor * a.total_weight).abs() < 1e-9 * factor.max(1.0));
    }

    #[test]
    fn loss_translation_invariant(
        rows in square_matrix(5),
        shift in -3.0f64..3.0,
        raw in prop::collection::vec(-1.0f64..1.0, 5),
    ) {
        let n = rows.len();
        let table = UtilityTable { rows };
        let scores: Vec<f64> = raw[..n].to_vec();
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let k = positions_from_order(&(0..n).collect::<Vec<_>>());
        let (a, ga) = urank_loss(&scores, &k, &table, 1.0).unwrap();
        let (b, gb) = urank_loss(&shifted, &k, &table, 1.0).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        for (x, y) in ga.iter().zip(&gb) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
