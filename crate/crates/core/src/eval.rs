//! Offline evaluation: oracle utility (#Click, CTR), relevance metrics (MAP,
//! nDCG@k), the click-log utility estimator, debiased #click@K / revenue@K,
//! per-position click curves, paired t-tests, and the regret bound checker.

use std::f64::consts::LOG2_E;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::click::{sessions_by_query, ClickSession, OracleClickModel};
use crate::ctr::{ClickEstimator, PROB_FLOOR};
use crate::data::{validate_permutation, Dataset, QueryGroup};
use crate::error::{Error, Result};
use crate::matching::km_match;
use crate::nn::softplus;
use crate::par;
use crate::ranker::{
    log2_logistic, pair_loss, positions_from_order, urank_pairs, BoundSnapshot, UtilityTable,
};

fn check_perms(dataset: &Dataset, perms: &[Vec<usize>]) -> Result<()> {
    if perms.len() != dataset.queries.len() {
        return Err(Error::Validation(format!(
            "{} permutations for {} queries",
            perms.len(),
            dataset.queries.len()
        )));
    }
    for (q, p) in dataset.queries.iter().zip(perms) {
        validate_permutation(p, q.items.len())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleUtility {
    /// Mean expected clicks per query.
    pub clicks_per_query: f64,
    /// Expected clicks per placed document (top `min(n_q, k_max)`).
    pub ctr: f64,
    pub per_query: Vec<f64>,
    pub placed_documents: usize,
}

/// Expected clicks of each query's list under the oracle click model.
pub fn oracle_utility(
    oracle: &OracleClickModel,
    dataset: &Dataset,
    perms: &[Vec<usize>],
) -> Result<OracleUtility> {
    check_perms(dataset, perms)?;
    let per_query = par::map_indexed(&dataset.queries, |qi, q| -> Result<f64> {
        perms[qi]
            .iter()
            .take(oracle.k_max)
            .enumerate()
            .map(|(p, &i)| oracle.click_prob(&q.items[i].features, q.items[i].relevance, p + 1))
            .sum()
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let placed: usize = dataset
        .queries
        .iter()
        .map(|q| q.items.len().min(oracle.k_max))
        .sum();
    let total: f64 = per_query.iter().sum();
    let nq = dataset.queries.len().max(1) as f64;
    Ok(OracleUtility {
        clicks_per_query: total / nq,
        ctr: if placed > 0 {
            total / placed as f64
        } else {
            0.0
        },
        per_query,
        placed_documents: placed,
    })
}

/// Average click probability at each position `1..=k_max`, summed over
/// queries and divided by the number of queries.
pub fn position_click_distribution(
    oracle: &OracleClickModel,
    dataset: &Dataset,
    perms: &[Vec<usize>],
) -> Result<Vec<f64>> {
    check_perms(dataset, perms)?;
    let mut acc = vec![0.0; oracle.k_max];
    for (q, perm) in dataset.queries.iter().zip(perms) {
        for (p, &i) in perm.iter().take(oracle.k_max).enumerate() {
            acc[p] += oracle.click_prob(&q.items[i].features, q.items[i].relevance, p + 1)?;
        }
    }
    let nq = dataset.queries.len().max(1) as f64;
    acc.iter_mut().for_each(|v| *v /= nq);
    Ok(acc)
}

/// Per-item detail for one query: assigned position and the oracle click
/// probability at every position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDump {
    pub query_id: String,
    pub method: String,
    pub items: Vec<ItemDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemDump {
    pub item: usize,
    pub relevance: u32,
    pub position: usize,
    pub click_prob: Vec<f64>,
}

pub fn query_dump(
    oracle: &OracleClickModel,
    query: &QueryGroup,
    perm: &[usize],
    method: &str,
) -> Result<QueryDump> {
    validate_permutation(perm, query.items.len())?;
    let pos = positions_from_order(perm);
    let items = query
        .items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            Ok(ItemDump {
                item: i,
                relevance: it.relevance,
                position: pos[i],
                click_prob: oracle.click_row(&it.features, it.relevance, oracle.k_max)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(QueryDump {
        query_id: query.query_id.clone(),
        method: method.to_string(),
        items,
    })
}

impl QueryDump {
    /// `item,position_assigned_by_method,click_prob_at_each_position` with
    /// the probabilities joined by `;`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("item,position_assigned_by_method,click_prob_at_each_position\n");
        for it in &self.items {
            let probs: Vec<String> = it.click_prob.iter().map(|p| format!("{p:.6}")).collect();
            writeln!(s, "{},{},{}", it.item, it.position, probs.join(";")).unwrap();
        }
        s
    }
}

/// Click-log utility estimate of one session for a target ranking:
/// `sum_i c_i * P(click | i, k_i) / P(click | i, k_i^h) * b_i`.
pub fn session_utility<E: ClickEstimator + ?Sized>(
    session: &ClickSession,
    query: &QueryGroup,
    estimator: &E,
    target_positions: &[usize],
) -> Result<f64> {
    let n = query.items.len();
    let mut total = 0.0;
    for (p, (&i, &c)) in session.placement.iter().zip(&session.clicks).enumerate() {
        if !c {
            continue;
        }
        let it = &query.items[i];
        let row = estimator.ctr_row(it, n)?;
        let logged = row[p];
        if logged < PROB_FLOOR {
            log::warn!(
                "clamped propensity {logged} for item {i} of query {}",
                query.query_id
            );
        }
        total += row[target_positions[i] - 1] / logged.max(PROB_FLOOR) * it.utility_value;
    }
    Ok(total)
}

/// Estimated utility averaged over each query's sessions, then over queries
/// that have sessions.
pub fn estimated_utility<E: ClickEstimator>(
    sessions: &[ClickSession],
    estimator: &E,
    dataset: &Dataset,
    perms: &[Vec<usize>],
) -> Result<f64> {
    check_perms(dataset, perms)?;
    let groups = sessions_by_query(sessions, dataset)?;
    let per_query = par::map_indexed(&dataset.queries, |qi, q| -> Result<Option<f64>> {
        if groups[qi].is_empty() {
            return Ok(None);
        }
        let pos = positions_from_order(&perms[qi]);
        let mut sum = 0.0;
        for &si in &groups[qi] {
            sessions[si].validate(q.items.len(), usize::MAX)?;
            sum += session_utility(&sessions[si], q, estimator, &pos)?;
        }
        Ok(Some(sum / groups[qi].len() as f64))
    });
    let mut total = 0.0;
    let mut n = 0usize;
    for v in per_query {
        if let Some(v) = v? {
            total += v;
            n += 1;
        }
    }
    Ok(if n > 0 { total / n as f64 } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DebiasedAtK {
    pub clicks_at_k: f64,
    pub revenue_at_k: f64,
}

/// Debiased clicks (and revenue) landing in the top `k` of the target
/// ranking: each logged click is reweighted by the ratio of examination
/// probabilities at the target and logged positions. Averaged over sessions
/// and then queries with sessions.
pub fn debiased_click_at_k(
    sessions: &[ClickSession],
    oracle: &OracleClickModel,
    dataset: &Dataset,
    perms: &[Vec<usize>],
    k: usize,
) -> Result<DebiasedAtK> {
    if k < 1 {
        return Err(Error::Validation("K must be at least 1".into()));
    }
    check_perms(dataset, perms)?;
    let groups = sessions_by_query(sessions, dataset)?;
    let examine = |f: &[f64], pos: usize| -> Result<f64> {
        if pos > oracle.k_max {
            Ok(0.0)
        } else {
            oracle.attention_prob(f, pos)
        }
    };
    let (mut clicks, mut revenue, mut n) = (0.0, 0.0, 0usize);
    for ((q, perm), idx) in dataset.queries.iter().zip(perms).zip(&groups) {
        if idx.is_empty() {
            continue;
        }
        let pos = positions_from_order(perm);
        let (mut qc, mut qr) = (0.0, 0.0);
        for &si in idx {
            let s = &sessions[si];
            for (p, (&i, &c)) in s.placement.iter().zip(&s.clicks).enumerate() {
                if !c || pos[i] > k {
                    continue;
                }
                let f = &q.items[i].features;
                let ratio = examine(f, pos[i])? / examine(f, p + 1)?.max(PROB_FLOOR);
                qc += ratio;
                qr += ratio * q.items[i].utility_value;
            }
        }
        clicks += qc / idx.len() as f64;
        revenue += qr / idx.len() as f64;
        n += 1;
    }
    let n = n.max(1) as f64;
    Ok(DebiasedAtK {
        clicks_at_k: clicks / n,
        revenue_at_k: revenue / n,
    })
}

/// Average precision with grades binarized at `>= 1`; `None` when the query
/// has no relevant item.
pub fn average_precision(order: &[usize], relevance: &[u32]) -> Option<f64> {
    let total_rel = relevance.iter().filter(|&&g| g >= 1).count();
    if total_rel == 0 {
        return None;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (r, &i) in order.iter().enumerate() {
        if relevance[i] >= 1 {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Some(sum / total_rel as f64)
}

/// nDCG@k with gain `2^y - 1` and discount `1 / log2(1 + rank)`; `None` when
/// the ideal DCG is zero.
pub fn ndcg(order: &[usize], relevance: &[u32], k: usize) -> Option<f64> {
    let gain = |g: u32| 2f64.powi(g as i32) - 1.0;
    let dcg_of = |grades: &mut dyn Iterator<Item = u32>| -> f64 {
        grades
            .take(k)
            .enumerate()
            .map(|(r, g)| gain(g) / ((r + 2) as f64).log2())
            .sum()
    };
    let mut ideal: Vec<u32> = relevance.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg_of(&mut ideal.into_iter());
    if idcg <= 0.0 {
        return None;
    }
    Some(dcg_of(&mut order.iter().map(|&i| relevance[i])) / idcg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMetric {
    pub value: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

fn mean_over<F: Fn(&[usize], &[u32]) -> Option<f64>>(
    dataset: &Dataset,
    perms: &[Vec<usize>],
    f: F,
) -> Result<RelevanceMetric> {
    check_perms(dataset, perms)?;
    let (mut sum, mut evaluated, mut skipped) = (0.0, 0, 0);
    for (q, p) in dataset.queries.iter().zip(perms) {
        match f(p, &q.relevances()) {
            Some(v) => {
                sum += v;
                evaluated += 1;
            }
            None => skipped += 1,
        }
    }
    Ok(RelevanceMetric {
        value: if evaluated > 0 {
            sum / evaluated as f64
        } else {
            0.0
        },
        evaluated,
        skipped,
    })
}

pub fn map_metric(dataset: &Dataset, perms: &[Vec<usize>]) -> Result<RelevanceMetric> {
    mean_over(dataset, perms, average_precision)
}

pub fn ndcg_at_k(dataset: &Dataset, perms: &[Vec<usize>], k: usize) -> Result<RelevanceMetric> {
    mean_over(dataset, perms, |o, r| ndcg(o, r, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub mean_difference: f64,
    pub t: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Two-sided paired t-test of `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Validation(
            "paired t-test needs two equal samples of size >= 2".into(),
        ));
    }
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        let p = if mean == 0.0 { 1.0 } else { 0.0 };
        let t = if mean == 0.0 {
            0.0
        } else {
            mean.signum() * f64::INFINITY
        };
        return Ok(TTest {
            mean_difference: mean,
            t,
            p_value: p,
            n,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist =
        StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Validation(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTest {
        mean_difference: mean,
        t,
        p_value: p.clamp(0.0, 1.0),
        n,
    })
}

/// `max(log2(1 + e^{2 sigma C}), 2)`.
pub fn c1_constant(sigma: f64, score_bound: f64) -> f64 {
    (softplus(2.0 * sigma * score_bound) * LOG2_E).max(2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub query_id: String,
    pub epoch: usize,
    /// Utility regret of the frozen ranking against the exact matching.
    pub regret: f64,
    /// Surrogate `sum_i sum_{j : s_i < s_j} |u(i, k_j) - u(i, k_i)|`.
    pub l_double_prime: f64,
    /// The pairwise training loss at the frozen positions.
    pub l_prime: f64,
    pub c1: f64,
    pub c2: f64,
    pub monotone: bool,
    /// Positions are exactly the strict descending order of the scores.
    pub consistent: bool,
    pub within_bound: bool,
    /// `L'' - L_r`; only meaningful when monotone and consistent.
    pub slack_regret: f64,
    /// `L' + C2 - L''`; only meaningful when monotone.
    pub slack_surrogate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BoundReport {
    pub entries: Vec<BoundEntry>,
    pub checked_surrogate: usize,
    pub checked_regret: usize,
    pub skipped_non_monotone: usize,
    pub skipped_inconsistent: usize,
    pub skipped_out_of_bound: usize,
    pub violations: usize,
    pub tolerance: f64,
}

pub const BOUND_TOLERANCE: f64 = 1e-9;

pub fn bound_entry(snap: &BoundSnapshot) -> Result<BoundEntry> {
    let n = snap.table.n_items();
    if snap.scores.len() != n || snap.positions.len() != n {
        return Err(Error::Validation(format!(
            "snapshot {} has mismatched lengths",
            snap.query_id
        )));
    }
    validate_permutation(
        &snap
            .positions
            .iter()
            .map(|k| k.wrapping_sub(1))
            .collect::<Vec<_>>(),
        n,
    )?;
    let t: &UtilityTable = &snap.table;
    let k = &snap.positions;
    let s = &snap.scores;

    let best = km_match(&t.to_weight_matrix()?)?.total_weight;
    let regret = best - t.utility_at(k);

    let mut l2 = 0.0;
    let mut c2_sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if s[i] < s[j] {
                l2 += (t.u(i, k[j]) - t.u(i, k[i])).abs();
            }
            if k[i] > k[j] {
                c2_sum += t.u(j, k[j]) - t.u(j, k[i]);
            }
        }
    }
    let (l1, _) = pair_loss(s, &urank_pairs(t, k), snap.sigma);
    let c1 = c1_constant(snap.sigma, snap.score_bound);
    let c2 = c1 * c2_sum;
    let consistent = (0..n).all(|i| (0..n).all(|j| k[i] >= k[j] || s[i] > s[j]));
    Ok(BoundEntry {
        query_id: snap.query_id.clone(),
        epoch: snap.epoch,
        regret,
        l_double_prime: l2,
        l_prime: l1,
        c1,
        c2,
        monotone: t.is_monotone(),
        consistent,
        within_bound: s.iter().all(|v| v.abs() <= snap.score_bound),
        slack_regret: l2 - regret,
        slack_surrogate: l1 + c2 - l2,
    })
}

/// Recomputes every term of the regret bound chain for each snapshot. The
/// surrogate bound is checked on monotone tables with scores in `[-C, C]`;
/// the regret bound additionally needs the positions to be the ranking the
/// scores induce.
pub fn verify_bounds(snapshots: &[BoundSnapshot]) -> Result<BoundReport> {
    let mut report = BoundReport {
        tolerance: BOUND_TOLERANCE,
        ..Default::default()
    };
    for snap in snapshots {
        let e = bound_entry(snap)?;
        if !e.monotone {
            report.skipped_non_monotone += 1;
        } else if !e.within_bound {
            report.skipped_out_of_bound += 1;
        } else {
            report.checked_surrogate += 1;
            let mut bad = e.slack_surrogate < -BOUND_TOLERANCE;
            if e.consistent {
                report.checked_regret += 1;
                bad |= e.slack_regret < -BOUND_TOLERANCE;
            } else {
                report.skipped_inconsistent += 1;
            }
            if bad {
                report.violations += 1;
            }
        }
        report.entries.push(e);
    }
    Ok(report)
}

impl BoundReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "query_id,epoch,regret,l_double_prime,l_prime,c1,c2,monotone,consistent,slack_regret,slack_surrogate\n",
        );
        for e in &self.entries {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                e.query_id,
                e.epoch,
                e.regret,
                e.l_double_prime,
                e.l_prime,
                e.c1,
                e.c2,
                e.monotone,
                e.consistent,
                e.slack_regret,
                e.slack_surrogate
            )
            .unwrap();
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub points: usize,
    pub indicator_le_logistic_violations: usize,
    pub indicator_le_shifted_logistic_violations: usize,
}

/// Evaluates on `points` evenly spaced `x` in `[-C, C]`:
/// `1[x <= 0] <= log2(1 + e^{-sigma x})` and
/// `1[x >= 0] <= max(log2(1 + e^{sigma C}), 2) - log2(1 + e^{-sigma x})`.
pub fn lemma_grid_check(sigma: f64, score_bound: f64, points: usize) -> LemmaCheck {
    let cap = (softplus(sigma * score_bound) * LOG2_E).max(2.0);
    let (mut v1, mut v2) = (0, 0);
    for p in 0..points {
        let x = if points == 1 {
            0.0
        } else {
            -score_bound + 2.0 * score_bound * p as f64 / (points - 1) as f64
        };
        let g = log2_logistic(sigma * x);
        if f64::from(u8::from(x <= 0.0)) > g + BOUND_TOLERANCE {
            v1 += 1;
        }
        if f64::from(u8::from(x >= 0.0)) > cap - g + BOUND_TOLERANCE {
            v2 += 1;
        }
    }
    LemmaCheck {
        points,
        indicator_le_logistic_violations: v1,
        indicator_le_shifted_logistic_violations: v2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Item;

    fn flat_oracle(k_max: usize) -> OracleClickModel {
        // w.x = -1 for x = [1, 0]: exponent 0, attention 1 everywhere.
        OracleClickModel {
            w: vec![-1.0, 1.0],
            eta: 1.5,
            epsilon: 0.1,
            y_max: 4,
            k_max,
        }
    }

    fn ds(grades: &[u32], x: [f64; 2]) -> Dataset {
        Dataset {
            queries: vec![QueryGroup {
                query_id: "q".into(),
                items: grades
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| Item {
                        item_id: i,
                        features: x.to_vec(),
                        relevance: g,
                        utility_value: 1.0,
                    })
                    .collect(),
            }],
            feature_dim: 2,
            y_max: 4,
        }
    }

    #[test]
    fn oracle_utility_position_insensitive() {
        let d = ds(&[4; 12], [1.0, 0.0]);
        let perm: Vec<usize> = (0..12).collect();
        let u = oracle_utility(&flat_oracle(10), &d, std::slice::from_ref(&perm)).unwrap();
        assert!((u.clicks_per_query - 10.0).abs() < 1e-12);
        assert!((u.ctr * u.placed_documents as f64 - u.clicks_per_query).abs() < 1e-9);
        let curve = position_click_distribution(&flat_oracle(10), &d, &[perm]).unwrap();
        assert!(curve.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn oracle_utility_hand_case() {
        // w.x = 0 -> exponent 1; grades 4, 2, 0 with eps 0.1: r = 1, 0.28, 0.1
        let o = OracleClickModel {
            w: vec![0.5, -0.5],
            eta: 1.0,
            epsilon: 0.1,
            y_max: 4,
            k_max: 10,
        };
        let d = ds(&[0, 4, 2], [0.3, 0.3]);
        let u = oracle_utility(&o, &d, &[vec![1, 2, 0]]).unwrap();
        let expect = 1.0 + 0.28 / 2.0 + 0.1 / 3.0;
        assert!((u.clicks_per_query - expect).abs() < 1e-12);
        assert!((u.ctr - expect / 3.0).abs() < 1e-12);
    }

    #[test]
    fn relevance_metric_examples() {
        assert_eq!(ndcg(&[0, 1, 2], &[3, 2, 0], 10), Some(1.0));
        // single relevant item at rank 2 of 5
        assert_eq!(
            average_precision(&[0, 1, 2, 3, 4], &[0, 1, 0, 0, 0]),
            Some(0.5)
        );
        assert_eq!(average_precision(&[0, 1], &[0, 0]), None);
        assert_eq!(ndcg(&[0, 1], &[0, 0], 10), None);
        let d = Dataset {
            queries: vec![
                ds(&[0, 0], [0.0, 0.0]).queries[0].clone(),
                ds(&[1, 0], [0.0, 0.0]).queries[0].clone(),
            ],
            feature_dim: 2,
            y_max: 4,
        };
        let m = map_metric(&d, &[vec![0, 1], vec![1, 0]]).unwrap();
        assert_eq!((m.value, m.evaluated, m.skipped), (0.5, 1, 1));
    }

    /// Straightforward nDCG@10 written from the textbook definition.
    fn reference_ndcg10(order: &[usize], rel: &[u32]) -> f64 {
        let mut dcg = 0.0;
        for r in 0..order.len().min(10) {
            dcg += (2f64.powi(rel[order[r]] as i32) - 1.0) / (r as f64 + 2.0).log2();
        }
        let mut sorted = rel.to_vec();
        sorted.sort();
        sorted.reverse();
        let mut idcg = 0.0;
        for (r, &y) in sorted.iter().take(10).enumerate() {
            idcg += (2f64.powi(y as i32) - 1.0) / (r as f64 + 2.0).log2();
        }
        dcg / idcg
    }

    #[test]
    fn ndcg_matches_reference_on_random_queries() {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut rng = crate::seed::rng(6);
        for _ in 0..50 {
            let rel: Vec<u32> = (0..6).map(|_| rng.random_range(0..5)).collect();
            if rel.iter().all(|&g| g == 0) {
                continue;
            }
            let mut order: Vec<usize> = (0..6).collect();
            order.shuffle(&mut rng);
            assert!(
                (ndcg(&order, &rel, 10).unwrap() - reference_ndcg10(&order, &rel)).abs() < 1e-12
            );
        }
    }

    #[test]
    fn estimated_utility_examples() {
        let o = OracleClickModel {
            w: vec![0.5, -0.5],
            eta: 1.0,
            epsilon: 0.1,
            y_max: 4,
            k_max: 3,
        };
        let mut d = ds(&[4, 2, 0], [0.3, 0.3]);
        d.queries[0].items[0].utility_value = 2.0;
        let s = ClickSession {
            query_id: "q".into(),
            placement: vec![2, 0, 1],
            clicks: vec![false, true, true],
        };
        // Logged placement as target: ratios are 1.
        let u = estimated_utility(std::slice::from_ref(&s), &o, &d, &[vec![2, 0, 1]]).unwrap();
        assert!((u - 3.0).abs() < 1e-12);
        let none = ClickSession {
            clicks: vec![false; 3],
            ..s.clone()
        };
        assert_eq!(
            estimated_utility(&[none], &o, &d, &[vec![0, 1, 2]]).unwrap(),
            0.0
        );
    }

    #[test]
    fn debiased_at_k_examples() {
        let o = OracleClickModel {
            w: vec![0.5, -0.5],
            eta: 1.0,
            epsilon: 0.1,
            y_max: 4,
            k_max: 2,
        };
        // exponent 1: attention 1 at position 1, 0.5 at position 2
        let mut d = ds(&[1, 1], [0.3, 0.3]);
        d.queries[0].items[0].utility_value = 2.0;
        let s = ClickSession {
            query_id: "q".into(),
            placement: vec![0, 1],
            clicks: vec![true, false],
        };
        // target moves item 0 to position 2: ratio 0.5, b = 2
        let r = debiased_click_at_k(std::slice::from_ref(&s), &o, &d, &[vec![1, 0]], 2).unwrap();
        assert!((r.clicks_at_k - 0.5).abs() < 1e-12);
        assert!((r.revenue_at_k - 1.0).abs() < 1e-12);
        let r1 = debiased_click_at_k(std::slice::from_ref(&s), &o, &d, &[vec![1, 0]], 1).unwrap();
        assert_eq!(r1.clicks_at_k, 0.0);
        let logged =
            debiased_click_at_k(std::slice::from_ref(&s), &o, &d, &[vec![0, 1]], 2).unwrap();
        assert_eq!(logged.clicks_at_k, 1.0);
        assert!(debiased_click_at_k(&[s], &o, &d, &[vec![0, 1]], 0).is_err());
    }

    #[test]
    fn t_test_known_values() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [1.1, 1.8, 2.7, 3.9, 4.6];
        let t = paired_t_test(&a, &b).unwrap();
        // d = [-.1, .2, .3, .1, .4], mean .18, sd = sqrt(0.037) -> t = .18 / sqrt(.037/5)
        assert!((t.t - 0.18 / (0.037f64 / 5.0).sqrt()).abs() < 1e-9);
        // scipy.stats.ttest_rel on the same samples
        assert!((t.t - 2.092457497388746).abs() < 1e-9);
        assert!((t.p_value - 0.10453999977837553).abs() < 1e-6);
        assert_eq!(paired_t_test(&a, &a).unwrap().p_value, 1.0);
    }

    #[test]
    fn zero_table_bounds_are_tight() {
        let snap = BoundSnapshot {
            query_id: "q".into(),
            epoch: 0,
            scores: vec![0.3, -0.2, 1.0],
            positions: vec![2, 3, 1],
            table: UtilityTable::zeros(3),
            sigma: 1.0,
            score_bound: 5.0,
        };
        let e = bound_entry(&snap).unwrap();
        assert_eq!(
            (e.regret, e.l_prime, e.l_double_prime, e.c2),
            (0.0, 0.0, 0.0, 0.0)
        );
        let r = verify_bounds(&[snap]).unwrap();
        assert_eq!(r.violations, 0);
        assert_eq!(r.checked_regret, 1);
    }

    #[test]
    fn natural_log_would_break_the_indicator_bound() {
        // ln(1 + e^0) < 1, which is why the logistic terms use log2.
        assert!(softplus(0.0) < 1.0);
        assert_eq!(log2_logistic(0.0), 1.0);
    }

    #[test]
    fn flat_top_item_case_stays_within_bound() {
        // Item 0 has a flat row, item 1 a steep one, scores nearly tied.
        let snap = BoundSnapshot {
            query_id: "q".into(),
            epoch: 0,
            scores: vec![0.05, -0.05],
            positions: vec![1, 2],
            table: UtilityTable {
                rows: vec![vec![1.0, 1.0], vec![1.0, 0.0]],
            },
            sigma: 1.0,
            score_bound: 5.0,
        };
        let e = bound_entry(&snap).unwrap();
        assert_eq!(e.c2, 0.0);
        assert_eq!(e.l_double_prime, 1.0);
        assert!(e.slack_surrogate >= 0.0, "{e:?}");
        assert!(e.slack_regret >= 0.0, "{e:?}");
    }

    #[test]
    fn lemma_grid_has_no_violations() {
        let c = lemma_grid_check(1.0, 5.0, 10_001);
        assert_eq!(c.indicator_le_logistic_violations, 0);
        assert_eq!(c.indicator_le_shifted_logistic_violations, 0);
    }
}
