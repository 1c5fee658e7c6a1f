//! Reference rankers: LambdaRank-style pairwise training on raw or
//! propensity-corrected clicks, CTR-at-position-1 sorting, and exact
//! matching on a click model.

use serde::{Deserialize, Serialize};

use crate::click::{argsort_desc, sessions_by_query, ClickSession, OracleClickModel};
use crate::ctr::{ClickEstimator, CtrModel};
use crate::data::{Dataset, QueryGroup};
use crate::error::Result;
use crate::matching::{km_match, WeightMatrix};
use crate::ranker::{
    train_pairwise, Pair, PairSource, RankerTrainReport, ScoringModel, UrankTrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    NaiveLambdarank,
    IpsLambdarankGroundtruth,
    #[serde(rename = "ctr_at_1")]
    CtrAt1,
    KmOracle,
    KmEstimated,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::NaiveLambdarank => "naive_lambdarank",
            BaselineKind::IpsLambdarankGroundtruth => "ips_lambdarank_groundtruth",
            BaselineKind::CtrAt1 => "ctr_at_1",
            BaselineKind::KmOracle => "km_oracle",
            BaselineKind::KmEstimated => "km_estimated",
        }
    }
}

/// Pair terms fixed before training.
pub struct FixedPairs {
    pub pairs: Vec<Vec<Pair>>,
}

impl PairSource for FixedPairs {
    fn pairs(&self, q: usize, _positions: &[usize]) -> Vec<Pair> {
        self.pairs[q].clone()
    }

    fn uses_positions(&self) -> bool {
        false
    }
}

/// Per-item click labels averaged over a query's sessions, each click
/// divided by `propensity(item, logged position)`.
pub fn click_labels<F>(
    sessions: &[ClickSession],
    dataset: &Dataset,
    propensity: F,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&QueryGroup, usize, usize) -> Result<f64>,
{
    let groups = sessions_by_query(sessions, dataset)?;
    dataset
        .queries
        .iter()
        .zip(&groups)
        .map(|(q, idx)| {
            let mut labels = vec![0.0; q.items.len()];
            for &si in idx {
                let s = &sessions[si];
                s.validate(q.items.len(), usize::MAX)?;
                for (p, (&item, &c)) in s.placement.iter().zip(&s.clicks).enumerate() {
                    if c {
                        labels[item] += 1.0 / propensity(q, item, p + 1)?;
                    }
                }
            }
            if !idx.is_empty() {
                let inv = 1.0 / idx.len() as f64;
                labels.iter_mut().for_each(|l| *l *= inv);
            }
            Ok(labels)
        })
        .collect()
}

/// Pairs `(i, j)` with `y_i > y_j`, weighted by the |dNDCG| of swapping them
/// in the ideal (label-sorted, ties by id) order. Gain is the label itself,
/// discount `1 / log2(1 + position)`.
pub fn lambda_pairs(labels: &[f64]) -> Vec<Pair> {
    let ideal = argsort_desc(labels);
    let mut pos = vec![0; labels.len()];
    for (p, &i) in ideal.iter().enumerate() {
        pos[i] = p + 1;
    }
    let disc = |k: usize| 1.0 / ((k + 1) as f64).log2();
    let idcg: f64 = ideal
        .iter()
        .enumerate()
        .map(|(p, &i)| labels[i] * disc(p + 1))
        .sum();
    if idcg <= 0.0 {
        return Vec::new();
    }
    let mut pairs = Vec::new();
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] > labels[j] {
                let w = ((labels[i] - labels[j]) * (disc(pos[i]) - disc(pos[j]))).abs() / idcg;
                pairs.push(Pair {
                    hi: i,
                    lo: j,
                    weight: w,
                });
            }
        }
    }
    pairs
}

fn train_on_labels(
    dataset: &Dataset,
    labels: &[Vec<f64>],
    config: &UrankTrainConfig,
    method: &str,
) -> Result<(ScoringModel, RankerTrainReport)> {
    let pairs: Vec<Vec<Pair>> = labels.iter().map(|l| lambda_pairs(l)).collect();
    let active: Vec<usize> = (0..pairs.len()).filter(|&q| !pairs[q].is_empty()).collect();
    train_pairwise(dataset, &FixedPairs { pairs }, &active, config, method)
}

/// LambdaRank on raw clicks, no position-bias correction.
pub fn train_naive_lambdarank(
    sessions: &[ClickSession],
    dataset: &Dataset,
    config: &UrankTrainConfig,
) -> Result<(ScoringModel, RankerTrainReport)> {
    let labels = click_labels(sessions, dataset, |_, _, _| Ok(1.0))?;
    train_on_labels(
        dataset,
        &labels,
        config,
        BaselineKind::NaiveLambdarank.name(),
    )
}

/// LambdaRank on clicks reweighted by the oracle's examination probability.
pub fn train_ips_lambdarank(
    sessions: &[ClickSession],
    dataset: &Dataset,
    oracle: &OracleClickModel,
    config: &UrankTrainConfig,
) -> Result<(ScoringModel, RankerTrainReport)> {
    let labels = ips_labels(sessions, dataset, oracle)?;
    train_on_labels(
        dataset,
        &labels,
        config,
        BaselineKind::IpsLambdarankGroundtruth.name(),
    )
}

pub fn ips_labels(
    sessions: &[ClickSession],
    dataset: &Dataset,
    oracle: &OracleClickModel,
) -> Result<Vec<Vec<f64>>> {
    click_labels(sessions, dataset, |q, item, k| {
        oracle.attention_prob(&q.items[item].features, k)
    })
}

/// Sorts by predicted click probability at position 1 times utility value.
pub fn rank_ctr_at_1(ctr_model: &CtrModel, query: &QueryGroup) -> Result<Vec<usize>> {
    let keys = query
        .items
        .iter()
        .map(|it| Ok(ctr_model.predict_ctr(&it.features, 1)? * it.utility_value))
        .collect::<Result<Vec<f64>>>()?;
    Ok(argsort_desc(&keys))
}

/// Utility weight matrix `P(click | i, k) * b_i` for positions `1..=min(n, k_max)`.
pub fn weight_matrix<E: ClickEstimator + ?Sized>(
    estimator: &E,
    query: &QueryGroup,
    k_max: usize,
) -> Result<WeightMatrix> {
    let n_pos = query.items.len().min(k_max);
    let rows = query
        .items
        .iter()
        .map(|it| {
            let mut r = estimator.ctr_row(it, n_pos)?;
            r.iter_mut().for_each(|v| *v *= it.utility_value);
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    WeightMatrix::from_rows(rows)
}

/// Exact utility-maximizing order under `estimator`.
pub fn rank_km<E: ClickEstimator + ?Sized>(
    estimator: &E,
    query: &QueryGroup,
    k_max: usize,
) -> Result<Vec<usize>> {
    Ok(km_match(&weight_matrix(estimator, query, k_max)?)?.to_order())
}
