//! Position-aware click-probability model `g(f, k)` trained by cross-entropy
//! on logged (item, position, click) triples.
//!
//! Two heads are available:
//! * `A1` maps features to `k_max` logits, one per position, so a single
//!   forward pass yields an item's whole position row.
//! * `A2` takes features concatenated with a one-hot position and returns a
//!   single logit.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::click::{sessions_by_query, ClickSession, OracleClickModel};
use crate::data::{Dataset, Item};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Mlp, MlpRecord, Optimizer, OptimizerKind};
use crate::{io, par, seed};

/// Predictions used as propensity denominators are clamped to this interval.
pub const PROB_FLOOR: f64 = 1e-6;
pub const PROB_CEIL: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    #[default]
    A1,
    A2,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::A1 => "A1",
            Architecture::A2 => "A2",
        })
    }
}

/// Anything that can supply `P(click | item, position)` for positions
/// `1..=n_positions`.
pub trait ClickEstimator: Sync {
    fn ctr_row(&self, item: &Item, n_positions: usize) -> Result<Vec<f64>>;
}

impl ClickEstimator for OracleClickModel {
    fn ctr_row(&self, item: &Item, n_positions: usize) -> Result<Vec<f64>> {
        self.click_row(&item.features, item.relevance, n_positions)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtrModel {
    pub architecture: Architecture,
    pub net: Mlp,
    pub k_max: usize,
    pub feature_dim: usize,
}

impl ClickEstimator for CtrModel {
    /// Clamped predictions; positions past `k_max` are 0.
    fn ctr_row(&self, item: &Item, n_positions: usize) -> Result<Vec<f64>> {
        let probs = self.predict_all_positions(&item.features);
        Ok((0..n_positions)
            .map(|p| probs.get(p).map_or(0.0, |v| v.clamp(PROB_FLOOR, PROB_CEIL)))
            .collect())
    }
}

impl CtrModel {
    pub fn new(
        architecture: Architecture,
        feature_dim: usize,
        k_max: usize,
        hidden: &[usize],
        seed: u64,
    ) -> Self {
        let mut rng = seed::rng(seed);
        let net = match architecture {
            Architecture::A1 => Mlp::new(feature_dim, hidden, k_max, &mut rng),
            Architecture::A2 => Mlp::new(feature_dim + k_max, hidden, 1, &mut rng),
        };
        CtrModel {
            architecture,
            net,
            k_max,
            feature_dim,
        }
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

    fn a2_input(&self, features: &[f64], position: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.feature_dim + self.k_max);
        x.extend_from_slice(features);
        x.extend((1..=self.k_max).map(|k| if k == position { 1.0 } else { 0.0 }));
        x
    }

    /// Logit for `(features, position)` with the position already validated.
    fn logit(&self, features: &[f64], position: usize) -> f64 {
        match self.architecture {
            Architecture::A1 => self.net.forward(features)[position - 1],
            Architecture::A2 => self.net.forward(&self.a2_input(features, position))[0],
        }
    }

    pub fn predict_ctr(&self, features: &[f64], position: usize) -> Result<f64> {
        self.check_position(position)?;
        Ok(sigmoid(self.logit(features, position)))
    }

    pub fn predict_all_positions(&self, features: &[f64]) -> Vec<f64> {
        match self.architecture {
            Architecture::A1 => self
                .net
                .forward(features)
                .into_iter()
                .map(sigmoid)
                .collect(),
            Architecture::A2 => (1..=self.k_max)
                .map(|k| sigmoid(self.net.forward(&self.a2_input(features, k))[0]))
                .collect(),
        }
    }

    /// Cross-entropy of one triple and its gradient, accumulated into `grad`.
    fn accumulate(&self, ex: &ClickExample<'_>, grad: &mut [f64], scale: f64) -> f64 {
        let (trace, out_index) = match self.architecture {
            Architecture::A1 => (self.net.forward_trace(ex.features), ex.position - 1),
            Architecture::A2 => (
                self.net
                    .forward_trace(&self.a2_input(ex.features, ex.position)),
                0,
            ),
        };
        let z = trace.output()[out_index];
        let label = if ex.click { 1.0 } else { 0.0 };
        let loss = bce_with_logit(label, z);
        let mut d_out = vec![0.0; self.net.output_dim()];
        d_out[out_index] = scale * (sigmoid(z) - label);
        self.net.backward(&trace, &d_out, grad);
        loss
    }

    pub fn to_checkpoint(&self) -> CtrCheckpoint {
        CtrCheckpoint {
            schema_version: io::SCHEMA_VERSION,
            kind: "ctr_model".into(),
            architecture: self.architecture,
            feature_dim: self.feature_dim,
            k_max: self.k_max,
            network: self.net.to_record(),
        }
    }

    pub fn from_checkpoint(ck: &CtrCheckpoint) -> Result<Self> {
        let net = Mlp::from_record(&ck.network).map_err(Error::Validation)?;
        let (want_in, want_out) = match ck.architecture {
            Architecture::A1 => (ck.feature_dim, ck.k_max),
            Architecture::A2 => (ck.feature_dim + ck.k_max, 1),
        };
        if net.input_dim() != want_in || net.output_dim() != want_out {
            return Err(Error::Validation(format!(
                "{} checkpoint has network {:?}, expected {want_in} inputs and {want_out} outputs",
                ck.architecture,
                net.sizes()
            )));
        }
        Ok(CtrModel {
            architecture: ck.architecture,
            net,
            k_max: ck.k_max,
            feature_dim: ck.feature_dim,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_json(path, &self.to_checkpoint())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&io::read_json(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrCheckpoint {
    pub schema_version: u32,
    pub kind: String,
    pub architecture: Architecture,
    pub feature_dim: usize,
    pub k_max: usize,
    pub network: MlpRecord,
}

/// `-p log q - (1 - p) log(1 - q)` with `q = sigmoid(z)`, computed from the logit.
pub fn bce_with_logit(label: f64, z: f64) -> f64 {
    // log(1 + e^-z) for label 1, log(1 + e^z) for label 0.
    label * crate::nn::softplus(-z) + (1.0 - label) * crate::nn::softplus(z)
}

#[derive(Debug, Clone, Copy)]
pub struct ClickExample<'a> {
    pub features: &'a [f64],
    pub position: usize,
    pub click: bool,
}

/// Flattens sessions into observed (item, position, click) triples. Items
/// that were not shown contribute nothing.
pub fn click_examples<'a>(
    sessions: &[ClickSession],
    dataset: &'a Dataset,
) -> Result<Vec<ClickExample<'a>>> {
    let index = dataset.query_index();
    let mut out = Vec::new();
    for s in sessions {
        let &qi = index.get(s.query_id.as_str()).ok_or_else(|| {
            Error::Validation(format!("session references unknown query {}", s.query_id))
        })?;
        let q = &dataset.queries[qi];
        s.validate(q.items.len(), usize::MAX)?;
        for (p, (&item, &click)) in s.placement.iter().zip(&s.clicks).enumerate() {
            out.push(ClickExample {
                features: &q.items[item].features,
                position: p + 1,
                click,
            });
        }
    }
    Ok(out)
}

const GRAD_CHUNK: usize = 64;

/// Mean cross-entropy over `examples` and its gradient w.r.t. all parameters.
/// Chunks are reduced in a fixed order, so the result does not depend on the
/// number of worker threads.
pub fn ctr_loss_and_grad(model: &CtrModel, examples: &[ClickExample<'_>]) -> (f64, Vec<f64>) {
    let n = examples.len().max(1) as f64;
    let chunks: Vec<&[ClickExample<'_>]> = examples.chunks(GRAD_CHUNK).collect();
    let parts = par::map_indexed(&chunks, |_, chunk| {
        let mut g = vec![0.0; model.net.n_params()];
        let loss: f64 = chunk
            .iter()
            .map(|ex| model.accumulate(ex, &mut g, 1.0 / n))
            .sum();
        (loss, g)
    });
    let loss = parts.iter().map(|(l, _)| l).sum::<f64>() / n;
    let grads: Vec<Vec<f64>> = parts.into_iter().map(|(_, g)| g).collect();
    (loss, par::sum_vectors(&grads, model.net.n_params()))
}

pub fn ctr_loss(model: &CtrModel, examples: &[ClickExample<'_>]) -> f64 {
    let chunks: Vec<&[ClickExample<'_>]> = examples.chunks(GRAD_CHUNK * 4).collect();
    let parts = par::map_indexed(&chunks, |_, chunk| {
        chunk
            .iter()
            .map(|ex| bce_with_logit(ex.click as u8 as f64, model.logit(ex.features, ex.position)))
            .sum::<f64>()
    });
    parts.iter().sum::<f64>() / examples.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CtrTrainConfig {
    pub architecture: Architecture,
    pub hidden_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub optimizer: OptimizerKind,
}

impl Default for CtrTrainConfig {
    fn default() -> Self {
        CtrTrainConfig {
            architecture: Architecture::A1,
            hidden_sizes: vec![64, 32],
            learning_rate: 0.1,
            epochs: 20,
            batch_size: 128,
            seed: 0,
            validation_fraction: 0.1,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl CtrTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.hidden_sizes.contains(&0) {
            return Err(Error::Config(
                "ctr: learning_rate, batch_size and hidden sizes must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "ctr: validation_fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_auc: Option<f64>,
    pub validation_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CtrTrainReport {
    pub architecture: Architecture,
    pub n_train: usize,
    pub n_validation: usize,
    pub epochs: Vec<CtrEpoch>,
}

impl CtrTrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_auc,validation_auc\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for e in &self.epochs {
            writeln!(
                s,
                "{},{},{},{}",
                e.epoch,
                e.loss,
                opt(e.train_auc),
                opt(e.validation_auc)
            )
            .unwrap();
        }
        s
    }
}

/// Mini-batch gradient descent on the cross-entropy of observed triples.
/// Epoch 0 of the report is the untrained model.
pub fn train_ctr(
    sessions: &[ClickSession],
    dataset: &Dataset,
    config: &CtrTrainConfig,
) -> Result<(CtrModel, CtrTrainReport)> {
    config.validate()?;
    if sessions.is_empty() {
        return Err(Error::Validation("no click sessions to train on".into()));
    }
    let k_max = sessions
        .iter()
        .map(|s| s.placement.len())
        .max()
        .unwrap_or(0);
    train_ctr_with_k_max(sessions, dataset, config, k_max)
}

pub fn train_ctr_with_k_max(
    sessions: &[ClickSession],
    dataset: &Dataset,
    config: &CtrTrainConfig,
    k_max: usize,
) -> Result<(CtrModel, CtrTrainReport)> {
    config.validate()?;
    if sessions.is_empty() || k_max == 0 {
        return Err(Error::Validation("no click sessions to train on".into()));
    }
    let mut examples = click_examples(sessions, dataset)?;
    if let Some(bad) = examples.iter().find(|e| e.position > k_max) {
        return Err(Error::PositionOutOfRange {
            position: bad.position,
            k_max,
        });
    }
    let mut rng = seed::rng(seed::derive(config.seed, seed::TAG_CTR));
    examples.shuffle(&mut rng);
    let n_val = (examples.len() as f64 * config.validation_fraction).floor() as usize;
    let (val, train) = examples.split_at(n_val);
    let mut train = train.to_vec();

    let mut model = CtrModel::new(
        config.architecture,
        dataset.feature_dim,
        k_max,
        &config.hidden_sizes,
        seed::derive(config.seed, seed::TAG_CTR ^ 1),
    );
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, model.net.n_params());
    let mut report = CtrTrainReport {
        architecture: config.architecture,
        n_train: train.len(),
        n_validation: val.len(),
        epochs: Vec::new(),
    };
    report.epochs.push(epoch_record(&model, 0, &train, val));

    for epoch in 1..=config.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(config.batch_size) {
            let (loss, grad) = ctr_loss_and_grad(&model, batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!("ctr loss {loss} at epoch {epoch}")));
            }
            opt.step(model.net.params_mut(), &grad);
        }
        let rec = epoch_record(&model, epoch, &train, val);
        if !rec.loss.is_finite() {
            return Err(Error::Diverged(format!(
                "ctr loss {} after epoch {epoch}",
                rec.loss
            )));
        }
        log::debug!(
            "ctr {} epoch {epoch}: loss {:.5}",
            config.architecture,
            rec.loss
        );
        report.epochs.push(rec);
    }
    Ok((model, report))
}

fn epoch_record(
    model: &CtrModel,
    epoch: usize,
    train: &[ClickExample<'_>],
    val: &[ClickExample<'_>],
) -> CtrEpoch {
    CtrEpoch {
        epoch,
        loss: ctr_loss(model, train),
        train_auc: examples_auc(model, train).ok(),
        validation_auc: examples_auc(model, val).ok(),
    }
}

pub fn examples_auc(model: &CtrModel, examples: &[ClickExample<'_>]) -> Result<f64> {
    let preds = par::map_indexed(examples, |_, ex| model.logit(ex.features, ex.position));
    let labels: Vec<bool> = examples.iter().map(|e| e.click).collect();
    auc_scores(&preds, &labels)
}

/// AUC of `model` over every observed triple in `sessions`.
pub fn auc(model: &CtrModel, sessions: &[ClickSession], dataset: &Dataset) -> Result<f64> {
    sessions_by_query(sessions, dataset)?;
    examples_auc(model, &click_examples(sessions, dataset)?)
}

/// Rank-based AUC (Mann-Whitney U); tied scores count one half.
pub fn auc_scores(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(
            "scores and labels differ in length".into(),
        ));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined(
            "AUC needs both positive and negative labels".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            end += 1;
        }
        // Average 1-based rank of the tie block.
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        rank_sum_pos += avg_rank * idx[start..end].iter().filter(|&&i| labels[i]).count() as f64;
        start = end;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}
