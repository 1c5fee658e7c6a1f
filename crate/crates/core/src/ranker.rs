//! The utility-driven pairwise ranker.
//!
//! A scoring network maps `(features, utility value)` to a score clipped to
//! `[-C, C]`. Training alternates an E-step, which ranks every query by the
//! current scores and freezes the resulting positions, with an M-step that
//! takes gradient steps on
//!
//! ```text
//! sum_i sum_{j : k_j < k_i} dUtil(i, j) * log2(1 + exp(-sigma (s_i - s_j)))
//! dUtil(i, j) = u(i, k_j) + u(j, k_i) - u(i, k_i) - u(j, k_j)
//! ```
//!
//! where `u(i, k)` is the click-log estimate of item `i`'s utility at
//! position `k`. `dUtil` keeps its sign: pairs whose swap would lose utility
//! are pushed further apart.
//!
//! Logistic terms use base-2 logarithms: `log2(1 + e^0) = 1`, which is what
//! makes the logistic term dominate the 0/1 pair-inversion indicator and
//! keeps the regret bounds checked in `eval` valid.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::click::{argsort_desc, sessions_by_query, ClickSession};
use crate::ctr::{ClickEstimator, PROB_FLOOR};
use crate::data::{Dataset, QueryGroup};
use crate::error::{Error, Result};
use crate::matching::WeightMatrix;
use crate::nn::{sigmoid, softplus, Mlp, MlpRecord, Optimizer, OptimizerKind};
use crate::{io, par, seed};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringModel {
    pub net: Mlp,
    pub feature_dim: usize,
    pub score_bound: f64,
    pub sigma: f64,
}

impl ScoringModel {
    pub fn new(
        feature_dim: usize,
        hidden: &[usize],
        score_bound: f64,
        sigma: f64,
        seed: u64,
    ) -> Self {
        let mut rng = seed::rng(seed);
        ScoringModel {
            net: Mlp::new(feature_dim + 1, hidden, 1, &mut rng),
            feature_dim,
            score_bound,
            sigma,
        }
    }

    fn input(features: &[f64], utility_value: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(features.len() + 1);
        x.extend_from_slice(features);
        x.push(utility_value);
        x
    }

    pub fn raw_score(&self, features: &[f64], utility_value: f64) -> f64 {
        self.net.forward(&Self::input(features, utility_value))[0]
    }

    /// Score clipped to `[-C, C]`.
    pub fn score(&self, features: &[f64], utility_value: f64) -> f64 {
        self.raw_score(features, utility_value)
            .clamp(-self.score_bound, self.score_bound)
    }

    pub fn raw_scores(&self, query: &QueryGroup) -> Vec<f64> {
        query
            .items
            .iter()
            .map(|it| self.raw_score(&it.features, it.utility_value))
            .collect()
    }

    pub fn scores(&self, query: &QueryGroup) -> Vec<f64> {
        query
            .items
            .iter()
            .map(|it| self.score(&it.features, it.utility_value))
            .collect()
    }

    pub fn to_checkpoint(&self, method: &str) -> ScoringCheckpoint {
        ScoringCheckpoint {
            schema_version: io::SCHEMA_VERSION,
            kind: "scoring_model".into(),
            method: method.to_string(),
            feature_dim: self.feature_dim,
            score_bound: self.score_bound,
            sigma: self.sigma,
            network: self.net.to_record(),
        }
    }

    pub fn from_checkpoint(ck: &ScoringCheckpoint) -> Result<Self> {
        let net = Mlp::from_record(&ck.network).map_err(Error::Validation)?;
        if net.input_dim() != ck.feature_dim + 1 || net.output_dim() != 1 {
            return Err(Error::Validation(format!(
                "scoring checkpoint network {:?} does not fit feature_dim {}",
                net.sizes(),
                ck.feature_dim
            )));
        }
        Ok(ScoringModel {
            net,
            feature_dim: ck.feature_dim,
            score_bound: ck.score_bound,
            sigma: ck.sigma,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, method: &str) -> Result<()> {
        io::write_json(path, &self.to_checkpoint(method))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let ck: ScoringCheckpoint = io::read_json(path)?;
        Ok((Self::from_checkpoint(&ck)?, ck.method))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringCheckpoint {
    pub schema_version: u32,
    pub kind: String,
    pub method: String,
    pub feature_dim: usize,
    pub score_bound: f64,
    pub sigma: f64,
    pub network: MlpRecord,
}

/// Items by descending score, ties by ascending item id. One forward pass per item.
///
/// Sorts on the unclipped network output: clipping is monotone, so the order
/// agrees with the clipped scores wherever those differ, and items saturated
/// at the same bound keep the order the network gives them.
pub fn rank(model: &ScoringModel, query: &QueryGroup) -> Vec<usize> {
    argsort_desc(&model.raw_scores(query))
}

/// 1-based position of every item under `order`.
pub fn positions_from_order(order: &[usize]) -> Vec<usize> {
    let mut pos = vec![0; order.len()];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p + 1;
    }
    pos
}

/// Per-query estimated utilities `u[i][k - 1]` for positions `1..=n_items`.
/// Columns past the click model's `k_max` are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityTable {
    pub rows: Vec<Vec<f64>>,
}

impl UtilityTable {
    pub fn zeros(n_items: usize) -> Self {
        UtilityTable {
            rows: vec![vec![0.0; n_items]; n_items],
        }
    }

    pub fn n_items(&self) -> usize {
        self.rows.len()
    }

    #[inline]
    pub fn u(&self, item: usize, position: usize) -> f64 {
        self.rows[item][position - 1]
    }

    pub fn is_zero(&self) -> bool {
        self.rows.iter().flatten().all(|&v| v == 0.0)
    }

    /// True when every row is nonincreasing in position.
    pub fn is_monotone(&self) -> bool {
        self.rows.iter().all(|r| r.windows(2).all(|w| w[1] <= w[0]))
    }

    /// Utility of the list whose item `i` sits at `positions[i]`.
    pub fn utility_at(&self, positions: &[usize]) -> f64 {
        positions
            .iter()
            .enumerate()
            .map(|(i, &k)| self.u(i, k))
            .sum()
    }

    pub fn to_weight_matrix(&self) -> Result<WeightMatrix> {
        WeightMatrix::from_rows(self.rows.clone())
    }
}

/// Builds one table per query of `dataset`:
/// `u(i, k) = mean over sessions of c_i * P(click | i, k) / P(click | i, k_i^h) * b_i`,
/// where sessions that did not show `i` contribute 0. Denominators are
/// floored at `PROB_FLOOR`.
pub fn build_utility_tables<E: ClickEstimator>(
    sessions: &[ClickSession],
    estimator: &E,
    dataset: &Dataset,
    k_max: usize,
) -> Result<Vec<UtilityTable>> {
    let groups = sessions_by_query(sessions, dataset)?;
    let tables = par::map_indexed(&dataset.queries, |qi, q| -> Result<(UtilityTable, usize)> {
        let n = q.items.len();
        let mut table = UtilityTable::zeros(n);
        let idx = &groups[qi];
        if idx.is_empty() {
            return Ok((table, 0));
        }
        let mut ctr_rows: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut clamped = 0;
        for &si in idx {
            let s = &sessions[si];
            s.validate(n, k_max)?;
            for (p, (&item, &click)) in s.placement.iter().zip(&s.clicks).enumerate() {
                if !click {
                    continue;
                }
                let it = &q.items[item];
                let row = match &mut ctr_rows[item] {
                    Some(r) => r,
                    slot @ None => slot.insert(estimator.ctr_row(it, n)?),
                };
                let logged = row[p];
                if logged < PROB_FLOOR {
                    clamped += 1;
                }
                let ratio_scale = it.utility_value / logged.max(PROB_FLOOR);
                for (u, &pk) in table.rows[item].iter_mut().zip(row.iter()) {
                    *u += pk * ratio_scale;
                }
            }
        }
        let inv = 1.0 / idx.len() as f64;
        table.rows.iter_mut().flatten().for_each(|v| *v *= inv);
        Ok((table, clamped))
    });
    let mut out = Vec::with_capacity(tables.len());
    let mut clamped_total = 0;
    for t in tables {
        let (t, c) = t?;
        clamped_total += c;
        out.push(t);
    }
    if clamped_total > 0 {
        log::warn!("{clamped_total} propensity denominators were clamped to {PROB_FLOOR}");
    }
    Ok(out)
}

fn check_position(table: &UtilityTable, k: usize) -> Result<()> {
    if k == 0 || k > table.n_items() {
        return Err(Error::PositionOutOfRange {
            position: k,
            k_max: table.n_items(),
        });
    }
    Ok(())
}

// Grouped per item so identical rows cancel exactly.
#[inline]
fn swap_gain(table: &UtilityTable, i: usize, j: usize, k_i: usize, k_j: usize) -> f64 {
    (table.u(i, k_j) - table.u(i, k_i)) + (table.u(j, k_i) - table.u(j, k_j))
}

/// Utility change from swapping items `i` (at `k_i`) and `j` (at `k_j`).
pub fn delta_util(table: &UtilityTable, i: usize, j: usize, k_i: usize, k_j: usize) -> Result<f64> {
    check_position(table, k_i)?;
    check_position(table, k_j)?;
    if k_i == k_j {
        return Err(Error::Validation(
            "swapped items must occupy different positions".into(),
        ));
    }
    Ok(swap_gain(table, i, j, k_i, k_j))
}

/// A weighted logistic pair term `weight * log2(1 + exp(-sigma (s_hi - s_lo)))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub hi: usize,
    pub lo: usize,
    pub weight: f64,
}

/// Pair terms for every `i` and every `j` ranked above it (`k_j < k_i`).
/// Zero-weight pairs are dropped.
pub fn urank_pairs(table: &UtilityTable, positions: &[usize]) -> Vec<Pair> {
    let n = positions.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let (ki, kj) = (positions[i], positions[j]);
            if kj < ki {
                let w = swap_gain(table, i, j, ki, kj);
                if w != 0.0 {
                    pairs.push(Pair {
                        hi: i,
                        lo: j,
                        weight: w,
                    });
                }
            }
        }
    }
    pairs
}

/// `log2(1 + e^-x)`.
#[inline]
pub fn log2_logistic(x: f64) -> f64 {
    softplus(-x) * std::f64::consts::LOG2_E
}

/// Loss and gradient with respect to the scores for a list of pair terms.
pub fn pair_loss(scores: &[f64], pairs: &[Pair], sigma: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; scores.len()];
    let mut loss = 0.0;
    for p in pairs {
        let x = sigma * (scores[p.hi] - scores[p.lo]);
        loss += p.weight * log2_logistic(x);
        // d/dx log2(1 + e^-x) = -sigmoid(-x) / ln 2
        let g = -p.weight * sigma * sigmoid(-x) * std::f64::consts::LOG2_E;
        grad[p.hi] += g;
        grad[p.lo] -= g;
    }
    (loss, grad)
}

/// The utility-weighted pairwise loss and its gradient w.r.t. `scores`,
/// with `positions` frozen from the previous ranking.
pub fn urank_loss(
    scores: &[f64],
    positions: &[usize],
    table: &UtilityTable,
    sigma: f64,
) -> Result<(f64, Vec<f64>)> {
    if scores.len() != positions.len() || scores.len() != table.n_items() {
        return Err(Error::Validation(format!(
            "urank_loss: {} scores, {} positions, table for {} items",
            scores.len(),
            positions.len(),
            table.n_items()
        )));
    }
    crate::data::validate_permutation(
        &positions
            .iter()
            .map(|k| k.wrapping_sub(1))
            .collect::<Vec<_>>(),
        positions.len(),
    )?;
    Ok(pair_loss(scores, &urank_pairs(table, positions), sigma))
}

/// Loss over a set of queries and its gradient w.r.t. the network
/// parameters. Per-query work runs in parallel; gradients are reduced in
/// query order. `scale` multiplies both loss and gradient.
pub fn pairwise_objective(
    model: &ScoringModel,
    queries: &[&QueryGroup],
    pairs: &[&[Pair]],
    scale: f64,
) -> (f64, Vec<f64>) {
    let idx: Vec<usize> = (0..queries.len()).collect();
    let parts = par::map_indexed(&idx, |_, &qi| {
        let q = queries[qi];
        let mut g = vec![0.0; model.net.n_params()];
        if pairs[qi].is_empty() {
            return (0.0, g);
        }
        let traces: Vec<_> = q
            .items
            .iter()
            .map(|it| {
                model
                    .net
                    .forward_trace(&ScoringModel::input(&it.features, it.utility_value))
            })
            .collect();
        let c = model.score_bound;
        let raw: Vec<f64> = traces.iter().map(|t| t.output()[0]).collect();
        let scores: Vec<f64> = raw.iter().map(|r| r.clamp(-c, c)).collect();
        let (loss, ds) = pair_loss(&scores, pairs[qi], model.sigma);
        for ((t, &r), &d) in traces.iter().zip(&raw).zip(&ds) {
            // Hard clipping passes no gradient outside [-C, C].
            if d != 0.0 && r.abs() <= c {
                model.net.backward(t, &[d * scale], &mut g);
            }
        }
        (loss * scale, g)
    });
    let loss = parts.iter().map(|(l, _)| l).sum();
    let grads: Vec<Vec<f64>> = parts.into_iter().map(|(_, g)| g).collect();
    (loss, par::sum_vectors(&grads, model.net.n_params()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UrankTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub sigma: f64,
    pub score_bound: f64,
    /// Epochs between E-steps.
    pub rerank_every: usize,
    pub hidden_sizes: Vec<usize>,
    /// Queries per gradient step.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Number of leading queries whose state is recorded at every E-step.
    pub snapshot_queries: usize,
}

impl Default for UrankTrainConfig {
    fn default() -> Self {
        UrankTrainConfig {
            epochs: 30,
            learning_rate: 0.005,
            seed: 0,
            sigma: 1.0,
            score_bound: 5.0,
            rerank_every: 1,
            hidden_sizes: vec![64, 32],
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            snapshot_queries: 10,
        }
    }
}

impl UrankTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.sigma > 0.0 && self.score_bound > 0.0) {
            return Err(Error::Config(
                "ranker: learning_rate, sigma and score_bound must be positive".into(),
            ));
        }
        if self.rerank_every == 0 || self.batch_size == 0 || self.hidden_sizes.contains(&0) {
            return Err(Error::Config(
                "ranker: rerank_every, batch_size and hidden sizes must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// State of one query at an E-step: enough to recompute every term of the
/// regret bound chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSnapshot {
    pub query_id: String,
    pub epoch: usize,
    pub scores: Vec<f64>,
    pub positions: Vec<usize>,
    pub table: UtilityTable,
    pub sigma: f64,
    pub score_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankerEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// Sum over queries of the estimated utility of the current ranking.
    pub estimated_utility: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RankerTrainReport {
    pub method: String,
    pub epochs: Vec<RankerEpoch>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub snapshots: Vec<BoundSnapshot>,
}

impl RankerTrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,estimated_utility\n");
        for e in &self.epochs {
            let u = e.estimated_utility.map_or(String::new(), |v| v.to_string());
            writeln!(s, "{},{},{}", e.epoch, e.loss, u).unwrap();
        }
        s
    }
}

/// Where the pair terms of a pairwise trainer come from.
pub trait PairSource: Sync {
    /// Pair terms of query `q` given the frozen `positions` of the last E-step.
    fn pairs(&self, q: usize, positions: &[usize]) -> Vec<Pair>;
    /// Whether `pairs` depends on `positions` (so E-steps are needed).
    fn uses_positions(&self) -> bool;
    fn utility(&self, _q: usize, _positions: &[usize]) -> Option<f64> {
        None
    }
    fn table(&self, _q: usize) -> Option<&UtilityTable> {
        None
    }
}

/// Utility-table pair source used by the U-rank objective.
pub struct UtilityPairs<'a> {
    pub tables: &'a [UtilityTable],
}

impl PairSource for UtilityPairs<'_> {
    fn pairs(&self, q: usize, positions: &[usize]) -> Vec<Pair> {
        urank_pairs(&self.tables[q], positions)
    }

    fn uses_positions(&self) -> bool {
        true
    }

    fn utility(&self, q: usize, positions: &[usize]) -> Option<f64> {
        Some(self.tables[q].utility_at(positions))
    }

    fn table(&self, q: usize) -> Option<&UtilityTable> {
        Some(&self.tables[q])
    }
}

/// Generic EM-style pairwise training loop shared by U-rank and the
/// LambdaRank-style baselines.
pub fn train_pairwise<S: PairSource>(
    dataset: &Dataset,
    source: &S,
    active: &[usize],
    config: &UrankTrainConfig,
    method: &str,
) -> Result<(ScoringModel, RankerTrainReport)> {
    config.validate()?;
    let mut model = ScoringModel::new(
        dataset.feature_dim,
        &config.hidden_sizes,
        config.score_bound,
        config.sigma,
        seed::derive(config.seed, seed::TAG_RANKER),
    );
    let mut rng = seed::rng(seed::derive(config.seed, seed::TAG_RANKER ^ 1));
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, model.net.n_params());
    let mut report = RankerTrainReport {
        method: method.to_string(),
        ..Default::default()
    };

    let e_step = |model: &ScoringModel| -> Vec<Vec<usize>> {
        par::map_indexed(&dataset.queries, |_, q| {
            positions_from_order(&rank(model, q))
        })
    };
    let build_pairs = |positions: &[Vec<usize>]| -> Vec<Vec<Pair>> {
        par::map_indexed(active, |_, &q| source.pairs(q, &positions[q]))
    };
    let epoch_stats =
        |model: &ScoringModel, positions: &[Vec<usize>], pairs: &[Vec<Pair>], epoch: usize| {
            let queries: Vec<&QueryGroup> = active.iter().map(|&q| &dataset.queries[q]).collect();
            let pair_refs: Vec<&[Pair]> = pairs.iter().map(Vec::as_slice).collect();
            let loss = objective_loss(model, &queries, &pair_refs);
            let estimated_utility = active
                .iter()
                .map(|&q| source.utility(q, &positions[q]))
                .sum::<Option<f64>>();
            RankerEpoch {
                epoch,
                loss,
                estimated_utility,
            }
        };

    let mut positions = e_step(&model);
    let mut pairs = build_pairs(&positions);
    record_snapshots(
        &mut report,
        &model,
        dataset,
        source,
        &positions,
        0,
        config.snapshot_queries,
    );
    report
        .epochs
        .push(epoch_stats(&model, &positions, &pairs, 0));

    let mut order: Vec<usize> = (0..active.len()).collect();
    for epoch in 1..=config.epochs {
        if source.uses_positions() && epoch > 1 && (epoch - 1) % config.rerank_every == 0 {
            positions = e_step(&model);
            pairs = build_pairs(&positions);
            record_snapshots(
                &mut report,
                &model,
                dataset,
                source,
                &positions,
                epoch - 1,
                config.snapshot_queries,
            );
        }
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let queries: Vec<&QueryGroup> =
                batch.iter().map(|&a| &dataset.queries[active[a]]).collect();
            let pair_refs: Vec<&[Pair]> = batch.iter().map(|&a| pairs[a].as_slice()).collect();
            let (loss, grad) =
                pairwise_objective(&model, &queries, &pair_refs, 1.0 / batch.len() as f64);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!(
                    "{method} loss {loss} at epoch {epoch}"
                )));
            }
            opt.step(model.net.params_mut(), &grad);
        }
        // Report the loss on the frozen positions, the utility on a fresh ranking.
        let fresh = e_step(&model);
        let mut rec = epoch_stats(&model, &fresh, &pairs, epoch);
        rec.loss = {
            let queries: Vec<&QueryGroup> = active.iter().map(|&q| &dataset.queries[q]).collect();
            let pair_refs: Vec<&[Pair]> = pairs.iter().map(Vec::as_slice).collect();
            objective_loss(&model, &queries, &pair_refs)
        };
        if !rec.loss.is_finite() {
            return Err(Error::Diverged(format!(
                "{method} loss {} after epoch {epoch}",
                rec.loss
            )));
        }
        log::debug!(
            "{method} epoch {epoch}: loss {:.6} utility {:?}",
            rec.loss,
            rec.estimated_utility
        );
        report.epochs.push(rec);
    }
    Ok((model, report))
}

fn objective_loss(model: &ScoringModel, queries: &[&QueryGroup], pairs: &[&[Pair]]) -> f64 {
    let idx: Vec<usize> = (0..queries.len()).collect();
    par::map_indexed(&idx, |_, &qi| {
        if pairs[qi].is_empty() {
            return 0.0;
        }
        pair_loss(&model.scores(queries[qi]), pairs[qi], model.sigma).0
    })
    .iter()
    .sum()
}

fn record_snapshots<S: PairSource>(
    report: &mut RankerTrainReport,
    model: &ScoringModel,
    dataset: &Dataset,
    source: &S,
    positions: &[Vec<usize>],
    epoch: usize,
    limit: usize,
) {
    for (q, query) in dataset.queries.iter().enumerate().take(limit) {
        if let Some(table) = source.table(q) {
            report.snapshots.push(BoundSnapshot {
                query_id: query.query_id.clone(),
                epoch,
                scores: model.scores(query),
                positions: positions[q].clone(),
                table: table.clone(),
                sigma: model.sigma,
                score_bound: model.score_bound,
            });
        }
    }
}

/// Trains the U-rank scorer on precomputed utility tables (one per query of
/// `dataset`). Queries whose table is all zero carry no pair terms and are
/// skipped.
pub fn train_urank_on_tables(
    dataset: &Dataset,
    tables: &[UtilityTable],
    config: &UrankTrainConfig,
) -> Result<(ScoringModel, RankerTrainReport)> {
    if tables.len() != dataset.queries.len() {
        return Err(Error::Validation(format!(
            "{} utility tables for {} queries",
            tables.len(),
            dataset.queries.len()
        )));
    }
    let active: Vec<usize> = (0..tables.len())
        .filter(|&q| !tables[q].is_zero())
        .collect();
    train_pairwise(dataset, &UtilityPairs { tables }, &active, config, "u_rank")
}

/// Builds utility tables from `sessions` with `ctr_model` and trains U-rank.
pub fn train_urank<E: ClickEstimator>(
    dataset: &Dataset,
    sessions: &[ClickSession],
    ctr_model: &E,
    k_max: usize,
    config: &UrankTrainConfig,
) -> Result<(ScoringModel, RankerTrainReport)> {
    let tables = build_utility_tables(sessions, ctr_model, dataset, k_max)?;
    train_urank_on_tables(dataset, &tables, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::click::OracleClickModel;
    use crate::data::Item;

    fn table(rows: &[&[f64]]) -> UtilityTable {
        UtilityTable {
            rows: rows.iter().map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn delta_util_examples() {
        let t = table(&[&[0.4, 0.3], &[0.35, 0.1]]);
        let d = delta_util(&t, 0, 1, 2, 1).unwrap();
        assert!((d - (-0.15)).abs() < 1e-12, "{d}");
        let z = UtilityTable::zeros(2);
        assert_eq!(delta_util(&z, 0, 1, 1, 2).unwrap(), 0.0);
        let same = table(&[&[0.5, 0.2], &[0.5, 0.2]]);
        assert_eq!(delta_util(&same, 0, 1, 1, 2).unwrap(), 0.0);
        assert!(delta_util(&t, 0, 1, 3, 1).is_err());
        assert!(delta_util(&t, 0, 1, 1, 1).is_err());
    }

    #[test]
    fn loss_examples() {
        let z = UtilityTable::zeros(3);
        let (l, g) = urank_loss(&[0.1, 0.5, -0.2], &[1, 2, 3], &z, 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));

        // dUtil(1, 0) = u(1,1) + u(0,2) - u(1,2) - u(0,1) = 1 + 0 - 0 - 0 = 1
        let t = table(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let (l, _) = urank_loss(&[0.3, 0.3], &[1, 2], &t, 1.0).unwrap();
        // log2(1 + e^0)
        assert!((l - 1.0).abs() < 1e-15);
        assert!(urank_loss(&[0.3], &[1, 2], &t, 1.0).is_err());
        assert!(urank_loss(&[0.3, 0.1], &[1, 1], &t, 1.0).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = seed::rng(21);
        for _ in 0..10 {
            let n = 5;
            let t = UtilityTable {
                rows: (0..n)
                    .map(|_| (0..n).map(|_| rng.random::<f64>()).collect())
                    .collect(),
            };
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let k = positions_from_order(&order);
            let (_, g) = urank_loss(&s, &k, &t, 1.3).unwrap();
            for i in 0..n {
                let h = 1e-6;
                let mut up = s.clone();
                up[i] += h;
                let mut dn = s.clone();
                dn[i] -= h;
                let fd = (urank_loss(&up, &k, &t, 1.3).unwrap().0
                    - urank_loss(&dn, &k, &t, 1.3).unwrap().0)
                    / (2.0 * h);
                assert!(
                    (fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3),
                    "{fd} vs {}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn loss_is_translation_invariant() {
        let t = table(&[&[0.9, 0.2, 0.1], &[0.5, 0.4, 0.3], &[0.3, 0.0, 0.0]]);
        let s = [0.2, -0.4, 1.1];
        let shifted: Vec<f64> = s.iter().map(|v| v + 2.5).collect();
        let k = [2, 3, 1];
        let (a, _) = urank_loss(&s, &k, &t, 1.0).unwrap();
        let (b, _) = urank_loss(&shifted, &k, &t, 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert_eq!(argsort_desc(&s), argsort_desc(&shifted));
    }

    fn item(id: usize, x: f64, rel: u32, b: f64) -> Item {
        Item {
            item_id: id,
            features: vec![x, 1.0 - x],
            relevance: rel,
            utility_value: b,
        }
    }

    #[test]
    fn utility_table_examples() {
        let oracle = OracleClickModel {
            w: vec![0.0, 0.0],
            eta: 1.0,
            epsilon: 0.1,
            y_max: 4,
            k_max: 3,
        };
        let ds = Dataset {
            queries: vec![QueryGroup {
                query_id: "q".into(),
                items: vec![
                    item(0, 0.2, 4, 2.0),
                    item(1, 0.7, 1, 1.0),
                    item(2, 0.5, 0, 1.0),
                ],
            }],
            feature_dim: 2,
            y_max: 4,
        };
        let s = ClickSession {
            query_id: "q".into(),
            placement: vec![1, 0, 2],
            clicks: vec![false, true, false],
        };
        let t = build_utility_tables(std::slice::from_ref(&s), &oracle, &ds, 3)
            .unwrap()
            .remove(0);
        assert!(t.rows[1].iter().all(|&v| v == 0.0));
        assert!(t.rows[2].iter().all(|&v| v == 0.0));
        // logged at position 2: ratio cancels there
        assert!((t.u(0, 2) - 2.0).abs() < 1e-12);
        // exponent 1: P(1)/P(2) = 2
        assert!((t.u(0, 1) - 4.0).abs() < 1e-12);
        assert!((t.u(0, 3) - 2.0 * 2.0 / 3.0).abs() < 1e-12);

        // averaging two sessions, one without the click, halves the row
        let mut s2 = s.clone();
        s2.clicks = vec![false; 3];
        let t2 = build_utility_tables(&[s, s2], &oracle, &ds, 3)
            .unwrap()
            .remove(0);
        assert!((t2.u(0, 2) - 1.0).abs() < 1e-12);

        let long = ClickSession {
            query_id: "q".into(),
            placement: vec![0, 1, 2],
            clicks: vec![true, false, false],
        };
        assert!(build_utility_tables(&[long], &oracle, &ds, 2).is_err());
    }

    #[test]
    fn rank_sorts_with_id_tie_break() {
        assert_eq!(argsort_desc(&[0.1, 0.9, 0.5]), vec![1, 2, 0]);
        let mut m = ScoringModel::new(2, &[3], 5.0, 1.0, 1);
        m.net.zero_output_layer();
        let q = QueryGroup {
            query_id: "q".into(),
            items: vec![
                item(0, 0.1, 0, 1.0),
                item(1, 0.9, 0, 1.0),
                item(2, 0.4, 0, 1.0),
            ],
        };
        assert_eq!(rank(&m, &q), vec![0, 1, 2]);
    }

    #[test]
    fn scores_are_clipped() {
        let mut m = ScoringModel::new(2, &[], 0.5, 1.0, 1);
        m.net.params_mut().iter_mut().for_each(|p| *p = 10.0);
        assert_eq!(m.score(&[1.0, 1.0], 1.0), 0.5);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let ds = crate::data::generate_synthetic(
            &crate::data::SyntheticConfig {
                n_queries: 3,
                n_docs: 4,
                feature_dim: 2,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let tables = vec![
            table(&[
                &[1.0, 0.5, 0.2, 0.1],
                &[0.0; 4],
                &[0.0; 4],
                &[0.3, 0.2, 0.1, 0.0]
            ]);
            3
        ];
        let cfg = UrankTrainConfig {
            epochs: 0,
            hidden_sizes: vec![4],
            ..Default::default()
        };
        let (m, rep) = train_urank_on_tables(&ds, &tables, &cfg).unwrap();
        let fresh = ScoringModel::new(
            2,
            &[4],
            cfg.score_bound,
            cfg.sigma,
            seed::derive(cfg.seed, seed::TAG_RANKER),
        );
        assert_eq!(m, fresh);
        assert_eq!(rep.epochs.len(), 1);
    }
}
