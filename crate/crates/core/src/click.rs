//! Oracle click model with item-specific attention bias, logging policies,
//! and click-session simulation.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, QueryGroup};
use crate::error::{Error, Result};
use crate::nn::{self, Mlp, Optimizer, OptimizerKind};
use crate::{par, seed};

/// Ground-truth click probabilities:
/// `P(click) = P(examined | x, k) * P(relevant | y)` with
/// `P(examined | x, k) = k^-max(w.x + 1, 0)` and
/// `P(relevant | y) = eps + (1 - eps) (2^y - 1) / (2^y_max - 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleClickModel {
    pub w: Vec<f64>,
    pub eta: f64,
    pub epsilon: f64,
    pub y_max: u32,
    pub k_max: usize,
}

impl OracleClickModel {
    /// Samples `w` uniformly from `[-eta, eta)` and centres it so the
    /// components sum to zero. Draws where centring pushes a component to
    /// `|w_j| >= eta` are rejected and redrawn.
    pub fn sample(
        feature_dim: usize,
        eta: f64,
        epsilon: f64,
        y_max: u32,
        k_max: usize,
        seed: u64,
    ) -> Result<Self> {
        if feature_dim == 0 || !(eta > 0.0) || k_max == 0 || y_max == 0 {
            return Err(Error::Validation(
                "oracle needs feature_dim, eta, y_max, k_max > 0".into(),
            ));
        }
        let mut rng = seed::rng(seed);
        loop {
            let mut w: Vec<f64> = (0..feature_dim)
                .map(|_| rng.random_range(-eta..eta))
                .collect();
            let mean = w.iter().sum::<f64>() / feature_dim as f64;
            w.iter_mut().for_each(|v| *v -= mean);
            if w.iter().all(|v| v.abs() < eta) {
                let model = OracleClickModel {
                    w,
                    eta,
                    epsilon,
                    y_max,
                    k_max,
                };
                model.validate()?;
                return Ok(model);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.w.iter().sum();
        if sum.abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "attention weights sum to {sum}, expected 0"
            )));
        }
        if let Some(v) = self.w.iter().find(|v| !(v.abs() < self.eta)) {
            return Err(Error::Validation(format!(
                "attention weight {v} not within (-{0}, {0})",
                self.eta
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Validation(format!(
                "epsilon {} outside (0, 1)",
                self.epsilon
            )));
        }
        if self.k_max == 0 || self.y_max == 0 {
            return Err(Error::Validation("k_max and y_max must be positive".into()));
        }
        Ok(())
    }

    /// `max(w.x + 1, 0)`, the item's position-decay exponent.
    pub fn attention_exponent(&self, features: &[f64]) -> f64 {
        (nn::dot(&self.w, features) + 1.0).max(0.0)
    }

    pub fn attention_prob(&self, features: &[f64], position: usize) -> Result<f64> {
        self.check_position(position)?;
        Ok((position as f64).powf(-self.attention_exponent(features)))
    }

    pub fn relevance_prob(&self, relevance: u32) -> Result<f64> {
        if relevance > self.y_max {
            return Err(Error::GradeOutOfRange {
                grade: relevance,
                y_max: self.y_max,
            });
        }
        let num = 2f64.powi(relevance as i32) - 1.0;
        let den = 2f64.powi(self.y_max as i32) - 1.0;
        Ok(self.epsilon + (1.0 - self.epsilon) * num / den)
    }

    pub fn click_prob(&self, features: &[f64], relevance: u32, position: usize) -> Result<f64> {
        Ok(self.attention_prob(features, position)? * self.relevance_prob(relevance)?)
    }

    /// Click probabilities of one item at positions `1..=n_positions`;
    /// positions past `k_max` are never examined and get 0.
    pub fn click_row(
        &self,
        features: &[f64],
        relevance: u32,
        n_positions: usize,
    ) -> Result<Vec<f64>> {
        let rel = self.relevance_prob(relevance)?;
        let e = self.attention_exponent(features);
        Ok((1..=n_positions)
            .map(|k| {
                if k <= self.k_max {
                    rel * (k as f64).powf(-e)
                } else {
                    0.0
                }
            })
            .collect())
    }

    fn check_position(&self, position: usize) -> Result<()> {
        if position == 0 || position > self.k_max {
            return Err(Error::PositionOutOfRange {
                position,
                k_max: self.k_max,
            });
        }
        Ok(())
    }
}

/// One impression: `placement[p]` is the item shown at position `p + 1`,
/// `clicks[p]` whether it was clicked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickSession {
    pub query_id: String,
    pub placement: Vec<usize>,
    #[serde(with = "bits")]
    pub clicks: Vec<bool>,
}

impl ClickSession {
    /// 1-based logged position of `item`, if it was shown.
    pub fn position_of(&self, item: usize) -> Option<usize> {
        self.placement
            .iter()
            .position(|&i| i == item)
            .map(|p| p + 1)
    }

    pub fn n_clicks(&self) -> usize {
        self.clicks.iter().filter(|&&c| c).count()
    }

    pub fn validate(&self, n_items: usize, k_max: usize) -> Result<()> {
        if self.placement.len() != self.clicks.len() {
            return Err(Error::Validation(format!(
                "session for {}: {} placements but {} clicks",
                self.query_id,
                self.placement.len(),
                self.clicks.len()
            )));
        }
        if self.placement.len() > k_max {
            return Err(Error::PositionOutOfRange {
                position: self.placement.len(),
                k_max,
            });
        }
        let mut seen = vec![false; n_items];
        for &i in &self.placement {
            if i >= n_items || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Validation(format!(
                    "session for {}: bad placement {:?}",
                    self.query_id, self.placement
                )));
            }
        }
        Ok(())
    }
}

mod bits {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[bool], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|&b| b as u8).collect::<Vec<u8>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        raw.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!(
                    "click must be 0 or 1, got {other}"
                ))),
            })
            .collect()
    }
}

/// Linear pointwise relevance regressor used as a weak production ranker.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseScorer {
    pub net: Mlp,
}

impl PointwiseScorer {
    pub fn score(&self, features: &[f64]) -> f64 {
        self.net.forward(features)[0]
    }

    /// Fits grades on a random `label_fraction` of all items (at least one)
    /// by Adam on squared error.
    pub fn train(dataset: &Dataset, label_fraction: f64, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed);
        let mut pool: Vec<(&[f64], f64)> = dataset
            .queries
            .iter()
            .flat_map(|q| &q.items)
            .map(|it| (it.features.as_slice(), it.relevance as f64))
            .collect();
        if pool.is_empty() {
            return Err(Error::Validation(
                "cannot train a pointwise scorer on an empty dataset".into(),
            ));
        }
        pool.shuffle(&mut rng);
        let n = ((pool.len() as f64 * label_fraction).round() as usize).clamp(1, pool.len());
        let sample = &pool[..n];
        let mut net = Mlp::new(dataset.feature_dim, &[], 1, &mut rng);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05, net.n_params());
        for _ in 0..300 {
            let mut grad = vec![0.0; net.n_params()];
            for (x, y) in sample {
                let tr = net.forward_trace(x);
                let resid = tr.output()[0] - y;
                net.backward(&tr, &[2.0 * resid / n as f64], &mut grad);
            }
            opt.step(net.params_mut(), &grad);
        }
        Ok(PointwiseScorer { net })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoggingPolicy {
    /// Fresh uniform permutation per session.
    RandomShuffle,
    RelevanceSorted,
    PretrainedPointwise(PointwiseScorer),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LoggingPolicyKind {
    RandomShuffle,
    RelevanceSorted,
    #[default]
    PretrainedPointwise,
}

impl LoggingPolicy {
    pub fn kind(&self) -> LoggingPolicyKind {
        match self {
            LoggingPolicy::RandomShuffle => LoggingPolicyKind::RandomShuffle,
            LoggingPolicy::RelevanceSorted => LoggingPolicyKind::RelevanceSorted,
            LoggingPolicy::PretrainedPointwise(_) => LoggingPolicyKind::PretrainedPointwise,
        }
    }
}

/// Indices sorted by descending key, ties by ascending index.
pub fn argsort_desc(keys: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    order
}

pub fn rank_by_policy(policy: &LoggingPolicy, query: &QueryGroup, seed: u64) -> Vec<usize> {
    match policy {
        LoggingPolicy::RandomShuffle => {
            let mut order: Vec<usize> = (0..query.len()).collect();
            order.shuffle(&mut seed::rng(seed));
            order
        }
        LoggingPolicy::RelevanceSorted => {
            let keys: Vec<f64> = query.items.iter().map(|it| it.relevance as f64).collect();
            argsort_desc(&keys)
        }
        LoggingPolicy::PretrainedPointwise(scorer) => {
            let keys: Vec<f64> = query
                .items
                .iter()
                .map(|it| scorer.score(&it.features))
                .collect();
            argsort_desc(&keys)
        }
    }
}

/// Simulates `sessions_per_query` impressions of every query. Query `q` draws
/// from the stream `derive_indexed(seed, TAG_SESSIONS, q)`, so the result is
/// identical with or without the `parallel` feature. Sessions come out
/// grouped by query in dataset order.
pub fn simulate_sessions(
    model: &OracleClickModel,
    policy: &LoggingPolicy,
    dataset: &Dataset,
    sessions_per_query: usize,
    seed: u64,
) -> Result<Vec<ClickSession>> {
    if sessions_per_query == 0 {
        return Err(Error::Validation(
            "sessions_per_query must be at least 1".into(),
        ));
    }
    if model.w.len() != dataset.feature_dim {
        return Err(Error::Validation(format!(
            "oracle has {} attention weights, dataset has {} features",
            model.w.len(),
            dataset.feature_dim
        )));
    }
    let per_query = par::map_indexed(&dataset.queries, |qi, q| -> Result<Vec<ClickSession>> {
        let qseed = seed::derive_indexed(seed, seed::TAG_SESSIONS, qi as u64);
        let mut rng = seed::rng(qseed);
        let rows: Vec<Vec<f64>> = q
            .items
            .iter()
            .map(|it| model.click_row(&it.features, it.relevance, model.k_max))
            .collect::<Result<_>>()?;
        let fixed = match policy {
            LoggingPolicy::RandomShuffle => None,
            _ => Some(rank_by_policy(policy, q, qseed)),
        };
        let mut out = Vec::with_capacity(sessions_per_query);
        for s in 0..sessions_per_query {
            let order = match &fixed {
                Some(o) => o.clone(),
                None => rank_by_policy(policy, q, seed::mix(qseed ^ s as u64)),
            };
            let placement: Vec<usize> = order.into_iter().take(model.k_max).collect();
            let clicks = placement
                .iter()
                .enumerate()
                .map(|(p, &i)| rng.random::<f64>() < rows[i][p])
                .collect();
            out.push(ClickSession {
                query_id: q.query_id.clone(),
                placement,
                clicks,
            });
        }
        Ok(out)
    });
    let mut sessions = Vec::with_capacity(dataset.queries.len() * sessions_per_query);
    for part in per_query {
        sessions.extend(part?);
    }
    Ok(sessions)
}

pub fn write_sessions_jsonl(sessions: &[ClickSession], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in sessions {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sessions_jsonl(path: impl AsRef<Path>) -> Result<Vec<ClickSession>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Groups session indices by query index in `dataset`.
pub fn sessions_by_query(sessions: &[ClickSession], dataset: &Dataset) -> Result<Vec<Vec<usize>>> {
    let index = dataset.query_index();
    let mut groups = vec![Vec::new(); dataset.queries.len()];
    for (si, s) in sessions.iter().enumerate() {
        let &qi = index.get(s.query_id.as_str()).ok_or_else(|| {
            Error::Validation(format!("session references unknown query {}", s.query_id))
        })?;
        groups[qi].push(si);
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Item;

    fn model(w: Vec<f64>) -> OracleClickModel {
        OracleClickModel {
            w,
            eta: 1.0,
            epsilon: 0.1,
            y_max: 4,
            k_max: 10,
        }
    }

    #[test]
    fn attention_examples() {
        let m = model(vec![0.5, -0.5]);
        assert_eq!(m.attention_prob(&[0.3, 0.9], 1).unwrap(), 1.0);
        // w.x = 0 -> exponent 1
        assert!((m.attention_prob(&[0.4, 0.4], 2).unwrap() - 0.5).abs() < 1e-15);
        // w.x = -1.5 -> exponent clamps to 0
        let steep = model(vec![1.5, -1.5]);
        assert_eq!(steep.attention_prob(&[0.0, 1.0], 9).unwrap(), 1.0);
        assert!(m.attention_prob(&[0.0, 0.0], 0).is_err());
        assert!(m.attention_prob(&[0.0, 0.0], 11).is_err());
    }

    #[test]
    fn relevance_examples() {
        let m = model(vec![0.0]);
        assert!((m.relevance_prob(0).unwrap() - 0.1).abs() < 1e-15);
        assert!((m.relevance_prob(4).unwrap() - 1.0).abs() < 1e-15);
        assert!((m.relevance_prob(2).unwrap() - 0.28).abs() < 1e-15);
        assert!(m.relevance_prob(5).is_err());
    }

    #[test]
    fn click_examples() {
        let m = model(vec![0.0, 0.0]);
        assert!((m.click_prob(&[0.2, 0.2], 4, 1).unwrap() - 1.0).abs() < 1e-15);
        assert!((m.click_prob(&[0.2, 0.2], 0, 1).unwrap() - 0.1).abs() < 1e-15);
        assert!((m.click_prob(&[0.2, 0.2], 2, 4).unwrap() - 0.07).abs() < 1e-15);
    }

    #[test]
    fn sampled_oracle_satisfies_invariants() {
        for s in 0..20 {
            let m = OracleClickModel::sample(20, 1.0, 0.1, 4, 10, s).unwrap();
            m.validate().unwrap();
        }
    }

    fn query(grades: &[u32]) -> QueryGroup {
        QueryGroup {
            query_id: "q".into(),
            items: grades
                .iter()
                .enumerate()
                .map(|(i, &g)| Item {
                    item_id: i,
                    features: vec![0.5, 0.5],
                    relevance: g,
                    utility_value: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn policy_orders() {
        let q = query(&[1, 3, 3]);
        assert_eq!(
            rank_by_policy(&LoggingPolicy::RelevanceSorted, &q, 0),
            vec![1, 2, 0]
        );
        let a = rank_by_policy(&LoggingPolicy::RandomShuffle, &q, 42);
        assert_eq!(a, rank_by_policy(&LoggingPolicy::RandomShuffle, &q, 42));
        let mut rng = seed::rng(0);
        let mut net = Mlp::new(2, &[], 1, &mut rng);
        net.zero_output_layer();
        let constant = LoggingPolicy::PretrainedPointwise(PointwiseScorer { net });
        assert_eq!(rank_by_policy(&constant, &q, 9), vec![0, 1, 2]);
    }

    #[test]
    fn fixed_policy_sessions_share_placement() {
        let ds = Dataset {
            queries: vec![query(&[0, 2, 4])],
            feature_dim: 2,
            y_max: 4,
        };
        let m = model(vec![0.3, -0.3]);
        let s = simulate_sessions(&m, &LoggingPolicy::RelevanceSorted, &ds, 3, 5).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|x| x.placement == vec![2, 1, 0]));
        assert_eq!(
            s,
            simulate_sessions(&m, &LoggingPolicy::RelevanceSorted, &ds, 3, 5).unwrap()
        );
        assert!(simulate_sessions(&m, &LoggingPolicy::RelevanceSorted, &ds, 0, 5).is_err());
    }

    #[test]
    fn sessions_drop_items_past_k_max() {
        let ds = Dataset {
            queries: vec![query(&[1; 12])],
            feature_dim: 2,
            y_max: 4,
        };
        let m = model(vec![0.0, 0.0]);
        let s = simulate_sessions(&m, &LoggingPolicy::RandomShuffle, &ds, 4, 1).unwrap();
        for x in &s {
            assert_eq!(x.placement.len(), 10);
            x.validate(12, 10).unwrap();
        }
    }

    #[test]
    fn session_json_uses_bit_clicks() {
        let s = ClickSession {
            query_id: "7".into(),
            placement: vec![2, 0],
            clicks: vec![true, false],
        };
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"query_id":"7","placement":[2,0],"clicks":[1,0]}"#);
        assert_eq!(serde_json::from_str::<ClickSession>(&j).unwrap(), s);
        assert!(serde_json::from_str::<ClickSession>(
            r#"{"query_id":"7","placement":[0],"clicks":[2]}"#
        )
        .is_err());
    }
}
