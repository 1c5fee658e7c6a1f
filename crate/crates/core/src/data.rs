//! Ranking datasets: the in-memory model, LETOR (SVMLight with `qid`) I/O and
//! a synthetic generator for runs without licensed data.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: usize,
    pub features: Vec<f64>,
    pub relevance: u32,
    /// Value earned per click (bid, price, or 1.0 for plain clicks).
    pub utility_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGroup {
    pub query_id: String,
    pub items: Vec<Item>,
}

impl QueryGroup {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn relevances(&self) -> Vec<u32> {
        self.items.iter().map(|it| it.relevance).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub queries: Vec<QueryGroup>,
    pub feature_dim: usize,
    pub y_max: u32,
}

impl Dataset {
    pub fn new(feature_dim: usize, y_max: u32) -> Self {
        Dataset {
            queries: Vec::new(),
            feature_dim,
            y_max,
        }
    }

    pub fn n_items(&self) -> usize {
        self.queries.iter().map(|q| q.items.len()).sum()
    }

    pub fn query_index(&self) -> HashMap<&str, usize> {
        self.queries
            .iter()
            .enumerate()
            .map(|(i, q)| (q.query_id.as_str(), i))
            .collect()
    }

    /// Checks the structural invariants shared by every constructor.
    pub fn validate(&self) -> Result<()> {
        for q in &self.queries {
            if q.items.is_empty() {
                return Err(Error::Validation(format!(
                    "query {} has no items",
                    q.query_id
                )));
            }
            for (idx, it) in q.items.iter().enumerate() {
                if it.item_id != idx {
                    return Err(Error::Validation(format!(
                        "query {}: item at index {idx} has id {}",
                        q.query_id, it.item_id
                    )));
                }
                if it.features.len() != self.feature_dim {
                    return Err(Error::Validation(format!(
                        "query {}: item {idx} has {} features, expected {}",
                        q.query_id,
                        it.features.len(),
                        self.feature_dim
                    )));
                }
                if it.relevance > self.y_max {
                    return Err(Error::GradeOutOfRange {
                        grade: it.relevance,
                        y_max: self.y_max,
                    });
                }
                if !(it.utility_value >= 0.0 && it.utility_value.is_finite()) {
                    return Err(Error::Validation(format!(
                        "query {}: item {idx} has utility value {}",
                        q.query_id, it.utility_value
                    )));
                }
            }
        }
        Ok(())
    }

    /// Split off the trailing `n_tail` queries.
    pub fn split_tail(mut self, n_tail: usize) -> (Dataset, Dataset) {
        let at = self.queries.len().saturating_sub(n_tail);
        let tail = self.queries.split_off(at);
        let head = Dataset {
            queries: self.queries,
            feature_dim: self.feature_dim,
            y_max: self.y_max,
        };
        let tail = Dataset {
            queries: tail,
            feature_dim: self.feature_dim,
            y_max: self.y_max,
        };
        (head, tail)
    }

    /// Min-max scale every feature column into [0, 1] in place. Constant
    /// columns become 0.
    pub fn normalize_min_max(&mut self) {
        let d = self.feature_dim;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for it in self.queries.iter().flat_map(|q| &q.items) {
            for (j, &v) in it.features.iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        for it in self.queries.iter_mut().flat_map(|q| &mut q.items) {
            for (j, v) in it.features.iter_mut().enumerate() {
                let span = hi[j] - lo[j];
                *v = if span > 0.0 { (*v - lo[j]) / span } else { 0.0 };
            }
        }
    }
}

/// Reads a LETOR file. Lines look like `<label> qid:<id> <fid>:<val> ... # comment`
/// with 1-based feature ids. Queries whose lines are not contiguous are merged.
/// A comment token `b=<value>` sets the item's utility value (default 1.0).
pub fn parse_letor(path: impl AsRef<Path>, feature_dim: usize, y_max: u32) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_letor_str(&text, &path.display().to_string(), feature_dim, y_max)
}

pub fn parse_letor_str(
    text: &str,
    source: &str,
    feature_dim: usize,
    y_max: u32,
) -> Result<Dataset> {
    let mut ds = Dataset::new(feature_dim, y_max);
    let mut by_qid: HashMap<String, usize> = HashMap::new();
    let perr = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let (body, comment) = match raw.find('#') {
            Some(p) => (&raw[..p], Some(&raw[p + 1..])),
            None => (raw, None),
        };
        let mut toks = body.split_whitespace();
        let Some(label_tok) = toks.next() else {
            continue;
        };
        let label: f64 = label_tok
            .parse()
            .map_err(|_| perr(lineno, format!("bad label {label_tok:?}")))?;
        if label < 0.0 || label.fract() != 0.0 {
            return Err(perr(
                lineno,
                format!("label {label_tok} is not a nonnegative integer"),
            ));
        }
        let grade = label as u32;
        if grade > y_max {
            return Err(Error::Validation(format!(
                "{source}:{lineno}: label {grade} exceeds y_max {y_max}"
            )));
        }
        let qid = toks
            .next()
            .and_then(|t| t.strip_prefix("qid:"))
            .ok_or_else(|| perr(lineno, "expected qid:<id> after label".into()))?;

        let mut features = vec![0.0; feature_dim];
        for tok in toks {
            let (fid, val) = tok
                .split_once(':')
                .ok_or_else(|| perr(lineno, format!("bad feature token {tok:?}")))?;
            let fid: usize = fid
                .parse()
                .map_err(|_| perr(lineno, format!("bad feature id {fid:?}")))?;
            let val: f64 = val
                .parse()
                .map_err(|_| perr(lineno, format!("bad feature value {val:?}")))?;
            if fid == 0 || fid > feature_dim {
                return Err(perr(
                    lineno,
                    format!("feature id {fid} outside 1..={feature_dim}"),
                ));
            }
            features[fid - 1] = val;
        }

        let mut utility_value = 1.0;
        if let Some(c) = comment {
            for tok in c.split_whitespace() {
                if let Some(v) = tok.strip_prefix("b=") {
                    utility_value = v
                        .parse()
                        .map_err(|_| perr(lineno, format!("bad utility value {v:?}")))?;
                }
            }
        }

        let qidx = *by_qid.entry(qid.to_string()).or_insert_with(|| {
            ds.queries.push(QueryGroup {
                query_id: qid.to_string(),
                items: Vec::new(),
            });
            ds.queries.len() - 1
        });
        let items = &mut ds.queries[qidx].items;
        items.push(Item {
            item_id: items.len(),
            features,
            relevance: grade,
            utility_value,
        });
    }
    ds.validate()?;
    Ok(ds)
}

/// Serializes a dataset in LETOR format. Zero-valued features are omitted;
/// floats use Rust's shortest round-trip representation.
pub fn to_letor_string(ds: &Dataset) -> String {
    let mut out = String::new();
    for q in &ds.queries {
        for it in &q.items {
            write!(out, "{} qid:{}", it.relevance, q.query_id).unwrap();
            for (j, &v) in it.features.iter().enumerate() {
                if v != 0.0 {
                    write!(out, " {}:{}", j + 1, v).unwrap();
                }
            }
            if it.utility_value != 1.0 {
                write!(out, " # b={}", it.utility_value).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_letor(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_letor_string(ds)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_queries: usize,
    pub n_docs: usize,
    pub feature_dim: usize,
    pub y_max: u32,
    /// Standard deviation of the label noise added to the latent relevance.
    pub label_noise: f64,
    /// When set, utility values are drawn uniformly from `[lo, hi)`.
    pub bid_range: Option<(f64, f64)>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_queries: 600,
            n_docs: 10,
            feature_dim: 20,
            y_max: 4,
            label_noise: 0.5,
            bid_range: None,
        }
    }
}

/// Generates a dataset whose grades are a noisy, quantized linear function of
/// uniform features, so relevance is learnable from the features. Grade `g`
/// has marginal probability proportional to `2^-g`.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    if cfg.n_queries == 0 || cfg.n_docs == 0 || cfg.feature_dim == 0 {
        return Err(Error::Validation(
            "synthetic dataset needs positive query, document and feature counts".into(),
        ));
    }
    if let Some((lo, hi)) = cfg.bid_range {
        if !(lo >= 0.0 && hi > lo) {
            return Err(Error::Validation(format!("bad bid range [{lo}, {hi})")));
        }
    }
    let mut rng = seed::rng(seed);
    let d = cfg.feature_dim;
    let direction: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = direction
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(1e-12);
    // x_j - 0.5 has variance 1/12, so this scaling gives the latent unit variance.
    let scale = 12f64.sqrt() / norm;
    let noise =
        Normal::new(0.0, cfg.label_noise.max(0.0)).map_err(|e| Error::Validation(e.to_string()))?;
    let thresholds = grade_thresholds(cfg.y_max, (1.0 + cfg.label_noise.powi(2)).sqrt());

    let mut ds = Dataset::new(d, cfg.y_max);
    for qi in 0..cfg.n_queries {
        let mut items = Vec::with_capacity(cfg.n_docs);
        for item_id in 0..cfg.n_docs {
            let features: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            let latent: f64 = features
                .iter()
                .zip(&direction)
                .map(|(x, v)| (x - 0.5) * v)
                .sum::<f64>()
                * scale
                + noise.sample(&mut rng);
            let relevance = thresholds.iter().filter(|&&t| latent > t).count() as u32;
            let utility_value = match cfg.bid_range {
                Some((lo, hi)) => rng.random_range(lo..hi),
                None => 1.0,
            };
            items.push(Item {
                item_id,
                features,
                relevance,
                utility_value,
            });
        }
        ds.queries.push(QueryGroup {
            query_id: qi.to_string(),
            items,
        });
    }
    Ok(ds)
}

fn grade_thresholds(y_max: u32, sd: f64) -> Vec<f64> {
    let weights: Vec<f64> = (0..=y_max).map(|g| 0.5f64.powi(g as i32)).collect();
    let total: f64 = weights.iter().sum();
    let normal = NormalDist::new(0.0, sd).expect("positive sd");
    let mut cum = 0.0;
    weights[..y_max as usize]
        .iter()
        .map(|w| {
            cum += w / total;
            normal.inverse_cdf(cum)
        })
        .collect()
}

/// Checks that `order` is a permutation of `0..n`.
pub fn validate_permutation(order: &[usize], n: usize) -> Result<()> {
    if order.len() != n {
        return Err(Error::InvalidPermutation(format!(
            "length {} for {n} items",
            order.len()
        )));
    }
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidPermutation(format!("{order:?}")));
        }
    }
    Ok(())
}

/// Keeps the first `min(n, k_max)` items of `order`, re-numbered `0..`.
pub fn truncate_to_top_k(query: &QueryGroup, k_max: usize, order: &[usize]) -> Result<QueryGroup> {
    validate_permutation(order, query.items.len())?;
    let items = order
        .iter()
        .take(k_max)
        .enumerate()
        .map(|(new_id, &old)| Item {
            item_id: new_id,
            ..query.items[old].clone()
        })
        .collect();
    Ok(QueryGroup {
        query_id: query.query_id.clone(),
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_line_with_gap() {
        let ds = parse_letor_str("2 qid:7 1:0.5 3:0.25\n", "t", 3, 4).unwrap();
        assert_eq!(ds.queries.len(), 1);
        assert_eq!(ds.queries[0].query_id, "7");
        let it = &ds.queries[0].items[0];
        assert_eq!(it.relevance, 2);
        assert_eq!(it.features, vec![0.5, 0.0, 0.25]);
        assert_eq!(it.utility_value, 1.0);
    }

    #[test]
    fn empty_file_has_no_queries() {
        let ds = parse_letor_str("", "t", 3, 4).unwrap();
        assert!(ds.queries.is_empty());
    }

    #[test]
    fn non_contiguous_qids_merge() {
        let text = "1 qid:1 1:1\n0 qid:2 1:2\n3 qid:1 1:3 # doc c\n";
        let ds = parse_letor_str(text, "t", 1, 4).unwrap();
        assert_eq!(ds.queries.len(), 2);
        assert_eq!(ds.queries[0].query_id, "1");
        assert_eq!(ds.queries[0].items.len(), 2);
        assert_eq!(ds.queries[0].items[1].features, vec![3.0]);
        assert_eq!(ds.queries[0].items[1].item_id, 1);
        assert_eq!(ds.queries[1].items.len(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_letor_str("1 qid:1 1:1\n1 1:2\n", "f.txt", 2, 4).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn label_above_y_max_is_validation_error() {
        let err = parse_letor_str("5 qid:1 1:1\n", "t", 1, 4).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn unknown_feature_id_is_error() {
        assert!(parse_letor_str("1 qid:1 4:1\n", "t", 3, 4).is_err());
        assert!(parse_letor_str("1 qid:1 0:1\n", "t", 3, 4).is_err());
    }

    #[test]
    fn synthetic_shape_and_determinism() {
        let cfg = SyntheticConfig {
            n_queries: 2,
            n_docs: 3,
            feature_dim: 4,
            y_max: 2,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg, 1).unwrap();
        let b = generate_synthetic(&cfg, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.queries.len(), 2);
        for q in &a.queries {
            assert_eq!(q.items.len(), 3);
            for it in &q.items {
                assert_eq!(it.features.len(), 4);
                assert!(it.features.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
        a.validate().unwrap();
    }

    #[test]
    fn synthetic_covers_every_grade() {
        let cfg = SyntheticConfig {
            n_queries: 100,
            n_docs: 10,
            feature_dim: 20,
            y_max: 4,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg, 7).unwrap();
        let mut hist = [0usize; 5];
        for it in ds.queries.iter().flat_map(|q| &q.items) {
            hist[it.relevance as usize] += 1;
        }
        assert!(hist.iter().all(|&c| c > 0), "{hist:?}");
    }

    #[test]
    fn synthetic_bids_in_range() {
        let cfg = SyntheticConfig {
            n_queries: 5,
            bid_range: Some((0.5, 2.0)),
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg, 3).unwrap();
        assert!(ds
            .queries
            .iter()
            .flat_map(|q| &q.items)
            .all(|it| (0.5..2.0).contains(&it.utility_value)));
    }

    fn toy_query(n: usize) -> QueryGroup {
        QueryGroup {
            query_id: "q".into(),
            items: (0..n)
                .map(|i| Item {
                    item_id: i,
                    features: vec![i as f64],
                    relevance: 0,
                    utility_value: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn truncation_lengths() {
        let q = toy_query(15);
        let order: Vec<usize> = (0..15).collect();
        assert_eq!(truncate_to_top_k(&q, 10, &order).unwrap().len(), 10);
        let q6 = toy_query(6);
        let order6: Vec<usize> = (0..6).collect();
        assert_eq!(truncate_to_top_k(&q6, 10, &order6).unwrap(), q6);
    }

    #[test]
    fn truncation_follows_order() {
        let q = toy_query(3);
        let t = truncate_to_top_k(&q, 2, &[2, 1, 0]).unwrap();
        let feats: Vec<f64> = t.items.iter().map(|it| it.features[0]).collect();
        assert_eq!(feats, vec![2.0, 1.0]);
        assert_eq!(t.items[0].item_id, 0);
        assert!(truncate_to_top_k(&q, 2, &[0, 0, 1]).is_err());
    }

    #[test]
    fn min_max_normalization() {
        let mut ds = parse_letor_str("0 qid:a 1:2 2:5\n0 qid:a 1:4 2:5\n", "t", 2, 1).unwrap();
        ds.normalize_min_max();
        assert_eq!(ds.queries[0].items[0].features, vec![0.0, 0.0]);
        assert_eq!(ds.queries[0].items[1].features, vec![1.0, 0.0]);
    }
}
