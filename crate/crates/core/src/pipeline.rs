//! Config-driven experiment runner: data -> simulate -> train-ctr ->
//! train rankers -> evaluate -> verify-bounds.
//!
//! Every stage seed is `seed::derive(master_seed, TAG_*)`, so the master seed
//! determines all outputs. Artifacts land in the output directory together
//! with a `manifest.json` recording the config hash and finished stages; a
//! rerun with `resume = true` and an unchanged config loads finished stages
//! from disk instead of recomputing them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{self, rank_ctr_at_1, rank_km, BaselineKind};
use crate::click::{
    rank_by_policy, read_sessions_jsonl, simulate_sessions, write_sessions_jsonl, ClickSession,
    LoggingPolicy, LoggingPolicyKind, OracleClickModel, PointwiseScorer,
};
use crate::ctr::{
    auc, train_ctr_with_k_max, Architecture, CtrModel, CtrTrainConfig, CtrTrainReport,
};
use crate::data::{self, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::{self, BoundReport, TTest};
use crate::nn::Mlp;
use crate::ranker::{
    self, build_utility_tables, BoundSnapshot, RankerTrainReport, ScoringModel, UrankTrainConfig,
};
use crate::{io, seed};

pub const OUTPUT_DIR_ENV: &str = "URANK_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        train_queries: usize,
        test_queries: usize,
        n_docs: usize,
        feature_dim: usize,
        y_max: u32,
        #[serde(default = "default_label_noise")]
        label_noise: f64,
        #[serde(default)]
        bid_range: Option<(f64, f64)>,
    },
    Letor {
        train_path: PathBuf,
        test_path: PathBuf,
        feature_dim: usize,
        y_max: u32,
        #[serde(default)]
        normalize: bool,
    },
}

fn default_label_noise() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub eta: f64,
    pub epsilon: f64,
    pub k_max: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            eta: 1.0,
            epsilon: 0.1,
            k_max: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoggingConfig {
    pub policy: LoggingPolicyKind,
    /// Fraction of training items whose grades the pointwise policy sees.
    pub label_fraction: f64,
}

impl Default for LoggingConfig {
    fn default() -> Self {
        LoggingConfig {
            policy: LoggingPolicyKind::PretrainedPointwise,
            label_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Cut-off of the debiased #click@K / revenue@K metrics.
    pub top_k: usize,
    /// Cut-off of nDCG.
    pub ndcg_k: usize,
    /// Test query dumped per method (item, position, click curve).
    pub dump_query: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            top_k: 5,
            ndcg_k: 10,
            dump_query: 0,
        }
    }
}

/// Ranking methods a run can compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    URank,
    NaiveLambdarank,
    IpsLambdarankGroundtruth,
    #[serde(rename = "ctr_at_1")]
    CtrAt1,
    KmOracle,
    KmEstimated,
    LoggingPolicy,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::URank => "u_rank",
            Method::NaiveLambdarank => BaselineKind::NaiveLambdarank.name(),
            Method::IpsLambdarankGroundtruth => BaselineKind::IpsLambdarankGroundtruth.name(),
            Method::CtrAt1 => BaselineKind::CtrAt1.name(),
            Method::KmOracle => BaselineKind::KmOracle.name(),
            Method::KmEstimated => BaselineKind::KmEstimated.name(),
            Method::LoggingPolicy => "logging_policy",
        }
    }

    pub fn all() -> Vec<Method> {
        vec![
            Method::URank,
            Method::NaiveLambdarank,
            Method::IpsLambdarankGroundtruth,
            Method::CtrAt1,
            Method::KmOracle,
            Method::KmEstimated,
            Method::LoggingPolicy,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Load finished stages from `output_dir` when the config hash matches.
    pub resume: bool,
    pub sessions_per_query: usize,
    /// Sessions simulated on test queries, used only for test AUC and the
    /// debiased top-K metrics.
    pub test_sessions_per_query: usize,
    pub methods: Vec<Method>,
    /// Train both CTR heads and report AUC and downstream U-rank #Click for each.
    pub compare_architectures: bool,
    pub dataset: DatasetSource,
    pub oracle: OracleConfig,
    pub logging: LoggingConfig,
    pub ctr: CtrTrainConfig,
    pub urank: UrankTrainConfig,
    pub lambdarank: UrankTrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: io::SCHEMA_VERSION,
            seed: 2024,
            output_dir: PathBuf::from("runs/default"),
            resume: false,
            sessions_per_query: 20,
            test_sessions_per_query: 5,
            methods: Method::all(),
            compare_architectures: false,
            dataset: DatasetSource::Synthetic {
                train_queries: 500,
                test_queries: 100,
                n_docs: 10,
                feature_dim: 20,
                y_max: 4,
                label_noise: default_label_noise(),
                bid_range: None,
            },
            oracle: OracleConfig::default(),
            logging: LoggingConfig::default(),
            ctr: CtrTrainConfig::default(),
            urank: UrankTrainConfig::default(),
            lambdarank: UrankTrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = io::read_text(path).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies the `URANK_OUTPUT_DIR` override, if set.
    pub fn with_env_overrides(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            self.output_dir = PathBuf::from(dir);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != io::SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {})",
                self.schema_version,
                io::SCHEMA_VERSION
            )));
        }
        if self.sessions_per_query == 0 {
            return Err(Error::Config("sessions_per_query must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        let o = &self.oracle;
        if !(o.eta > 0.0) || !(o.epsilon > 0.0 && o.epsilon < 1.0) || o.k_max == 0 {
            return Err(Error::Config(
                "oracle: need eta > 0, 0 < epsilon < 1, k_max > 0".into(),
            ));
        }
        if !(self.logging.label_fraction > 0.0 && self.logging.label_fraction <= 1.0) {
            return Err(Error::Config(
                "logging.label_fraction must be in (0, 1]".into(),
            ));
        }
        match &self.dataset {
            DatasetSource::Synthetic {
                train_queries,
                test_queries,
                n_docs,
                feature_dim,
                y_max,
                ..
            } => {
                if *train_queries == 0
                    || *test_queries == 0
                    || *n_docs == 0
                    || *feature_dim == 0
                    || *y_max == 0
                {
                    return Err(Error::Config(
                        "synthetic dataset sizes must be positive".into(),
                    ));
                }
            }
            DatasetSource::Letor {
                feature_dim, y_max, ..
            } => {
                if *feature_dim == 0 || *y_max == 0 {
                    return Err(Error::Config(
                        "letor feature_dim and y_max must be positive".into(),
                    ));
                }
            }
        }
        if self.eval.top_k == 0 || self.eval.ndcg_k == 0 {
            return Err(Error::Config("eval cut-offs must be positive".into()));
        }
        self.ctr.validate()?;
        self.urank.validate()?;
        self.lambdarank.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical TOML form, excluding the output location and
    /// the resume flag.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.resume = false;
        hex_digest(c.to_toml().as_bytes())
    }

    pub fn y_max(&self) -> u32 {
        match &self.dataset {
            DatasetSource::Synthetic { y_max, .. } | DatasetSource::Letor { y_max, .. } => *y_max,
        }
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MethodMetrics {
    pub method: String,
    pub clicks_per_query: f64,
    pub ctr: f64,
    pub map: f64,
    pub ndcg: f64,
    pub relevance_queries_evaluated: usize,
    pub relevance_queries_skipped: usize,
    pub debiased_clicks_at_k: Option<f64>,
    pub debiased_revenue_at_k: Option<f64>,
    pub per_query_clicks: Vec<f64>,
    pub position_ctr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub method: String,
    pub baseline: String,
    pub test: TTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureRow {
    pub architecture: Architecture,
    pub train_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub clicks_per_query: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config_hash: String,
    /// How the CTR column is normalized.
    pub ctr_denominator: String,
    pub n_test_queries: usize,
    pub top_k: usize,
    pub ndcg_k: usize,
    pub methods: Vec<MethodMetrics>,
    pub comparisons: Vec<Comparison>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub architectures: Vec<ArchitectureRow>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodMetrics> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# config_hash={} ctr_denominator={}\nmethod,clicks_per_query,ctr,map,ndcg@{},debiased_clicks@{},debiased_revenue@{}\n",
            self.config_hash, self.ctr_denominator, self.ndcg_k, self.top_k, self.top_k
        );
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for m in &self.methods {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                m.method,
                m.clicks_per_query,
                m.ctr,
                m.map,
                m.ndcg,
                opt(m.debiased_clicks_at_k),
                opt(m.debiased_revenue_at_k)
            )
            .unwrap();
        }
        s
    }

    /// `position,avg_ctr,method`.
    pub fn position_csv(&self) -> String {
        let mut s = String::from("position,avg_ctr,method\n");
        for m in &self.methods {
            for (p, v) in m.position_ctr.iter().enumerate() {
                writeln!(s, "{},{},{}", p + 1, v, m.method).unwrap();
            }
        }
        s
    }

    pub fn architecture_csv(&self) -> String {
        let mut s = String::from("architecture,train_auc,test_auc,clicks_per_query\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.architectures {
            writeln!(
                s,
                "{},{},{},{}",
                r.architecture,
                opt(r.train_auc),
                opt(r.test_auc),
                r.clicks_per_query
            )
            .unwrap();
        }
        s
    }
}

/// Results of a full run, kept in memory for callers and tests.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub train: Dataset,
    pub test: Dataset,
    pub oracle: OracleClickModel,
    pub train_sessions: Vec<ClickSession>,
    pub test_sessions: Vec<ClickSession>,
    pub ctr_model: CtrModel,
    pub rankers: BTreeMap<Method, ScoringModel>,
    pub ranker_reports: BTreeMap<Method, RankerTrainReport>,
    pub report: EvalReport,
    pub bounds: BoundReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
struct Manifest {
    schema_version: u32,
    config_hash: String,
    completed: Vec<String>,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    hash: String,
    manifest: Manifest,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn done(&self, stage: &str) -> bool {
        self.cfg.resume
            && self.manifest.config_hash == self.hash
            && self.manifest.completed.iter().any(|s| s == stage)
    }

    fn finish(&mut self, stage: &str) -> Result<()> {
        if !self.manifest.completed.iter().any(|s| s == stage) {
            self.manifest.completed.push(stage.to_string());
        }
        io::write_json(self.path("manifest.json"), &self.manifest)
    }

    fn seed(&self, tag: u64) -> u64 {
        seed::derive(self.cfg.seed, tag)
    }
}

/// Runs every stage and writes all artifacts. Errors are wrapped with the
/// name of the failing stage.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let hash = cfg.hash();
    let dir = cfg.output_dir.clone();
    let previous: Manifest = if cfg.resume {
        io::read_json(dir.join("manifest.json")).unwrap_or_default()
    } else {
        Manifest::default()
    };
    let manifest = if previous.config_hash == hash {
        previous
    } else {
        Manifest {
            schema_version: io::SCHEMA_VERSION,
            config_hash: hash.clone(),
            completed: Vec::new(),
        }
    };
    let mut run = Run {
        cfg,
        dir,
        hash,
        manifest,
    };
    io::write_text(run.path("config.toml"), &cfg.to_toml()).map_err(|e| e.in_stage("setup"))?;

    let (train, test, oracle) = stage_data(&mut run).map_err(|e| e.in_stage("data"))?;
    let (policy, train_sessions, test_sessions) =
        stage_simulate(&mut run, &train, &test, &oracle).map_err(|e| e.in_stage("simulate"))?;
    let (ctr_model, ctr_models) =
        stage_ctr(&mut run, &train, &train_sessions).map_err(|e| e.in_stage("train-ctr"))?;
    let (rankers, ranker_reports) =
        stage_rankers(&mut run, &train, &train_sessions, &oracle, &ctr_model)
            .map_err(|e| e.in_stage("train-ranker"))?;
    let report = stage_evaluate(
        &mut run,
        &EvalInputs {
            test: &test,
            oracle: &oracle,
            policy: &policy,
            ctr_model: &ctr_model,
            rankers: &rankers,
            test_sessions: &test_sessions,
            train: &train,
            train_sessions: &train_sessions,
            ctr_models: &ctr_models,
        },
    )
    .map_err(|e| e.in_stage("evaluate"))?;
    let bounds = stage_bounds(
        &mut run,
        &train,
        &train_sessions,
        &oracle,
        &rankers,
        &ranker_reports,
    )
    .map_err(|e| e.in_stage("verify-bounds"))?;

    Ok(PipelineOutput {
        train,
        test,
        oracle,
        train_sessions,
        test_sessions,
        ctr_model,
        rankers,
        ranker_reports,
        report,
        bounds,
    })
}

fn stage_data(run: &mut Run<'_>) -> Result<(Dataset, Dataset, OracleClickModel)> {
    let cfg = run.cfg;
    let (train_p, test_p, oracle_p) = (
        run.path("train.letor"),
        run.path("test.letor"),
        run.path("oracle.json"),
    );
    let y_max = cfg.y_max();
    if run.done("data") {
        let oracle: OracleClickModel = io::read_json(&oracle_p)?;
        let d = oracle.w.len();
        return Ok((
            data::parse_letor(&train_p, d, y_max)?,
            data::parse_letor(&test_p, d, y_max)?,
            oracle,
        ));
    }
    let (train, test) = match &cfg.dataset {
        DatasetSource::Synthetic {
            train_queries,
            test_queries,
            n_docs,
            feature_dim,
            y_max,
            label_noise,
            bid_range,
        } => {
            let syn = SyntheticConfig {
                n_queries: train_queries + test_queries,
                n_docs: *n_docs,
                feature_dim: *feature_dim,
                y_max: *y_max,
                label_noise: *label_noise,
                bid_range: *bid_range,
            };
            data::generate_synthetic(&syn, run.seed(seed::TAG_DATA))?.split_tail(*test_queries)
        }
        DatasetSource::Letor {
            train_path,
            test_path,
            feature_dim,
            y_max,
            normalize,
        } => {
            let mut train = data::parse_letor(train_path, *feature_dim, *y_max)?;
            let mut test = data::parse_letor(test_path, *feature_dim, *y_max)?;
            if *normalize {
                train.normalize_min_max();
                test.normalize_min_max();
            }
            (train, test)
        }
    };
    let oracle = OracleClickModel::sample(
        train.feature_dim,
        cfg.oracle.eta,
        cfg.oracle.epsilon,
        y_max,
        cfg.oracle.k_max,
        run.seed(seed::TAG_ORACLE),
    )?;
    data::write_letor(&train, &train_p)?;
    data::write_letor(&test, &test_p)?;
    io::write_json(&oracle_p, &oracle)?;
    run.finish("data")?;
    // Reload so a resumed run sees exactly the same (printed) values.
    Ok((
        data::parse_letor(&train_p, train.feature_dim, y_max)?,
        data::parse_letor(&test_p, test.feature_dim, y_max)?,
        oracle,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PolicyCheckpoint {
    schema_version: u32,
    kind: LoggingPolicyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scorer: Option<crate::nn::MlpRecord>,
}

fn save_policy(policy: &LoggingPolicy, path: &Path) -> Result<()> {
    let scorer = match policy {
        LoggingPolicy::PretrainedPointwise(s) => Some(s.net.to_record()),
        _ => None,
    };
    io::write_json(
        path,
        &PolicyCheckpoint {
            schema_version: io::SCHEMA_VERSION,
            kind: policy.kind(),
            scorer,
        },
    )
}

pub fn load_policy(path: impl AsRef<Path>) -> Result<LoggingPolicy> {
    let ck: PolicyCheckpoint = io::read_json(path)?;
    Ok(match ck.kind {
        LoggingPolicyKind::RandomShuffle => LoggingPolicy::RandomShuffle,
        LoggingPolicyKind::RelevanceSorted => LoggingPolicy::RelevanceSorted,
        LoggingPolicyKind::PretrainedPointwise => {
            let rec = ck.scorer.ok_or_else(|| {
                Error::Validation("pointwise policy checkpoint has no scorer".into())
            })?;
            LoggingPolicy::PretrainedPointwise(PointwiseScorer {
                net: Mlp::from_record(&rec).map_err(Error::Validation)?,
            })
        }
    })
}

pub fn build_policy(
    kind: LoggingPolicyKind,
    train: &Dataset,
    label_fraction: f64,
    seed: u64,
) -> Result<LoggingPolicy> {
    Ok(match kind {
        LoggingPolicyKind::RandomShuffle => LoggingPolicy::RandomShuffle,
        LoggingPolicyKind::RelevanceSorted => LoggingPolicy::RelevanceSorted,
        LoggingPolicyKind::PretrainedPointwise => {
            LoggingPolicy::PretrainedPointwise(PointwiseScorer::train(train, label_fraction, seed)?)
        }
    })
}

fn stage_simulate(
    run: &mut Run<'_>,
    train: &Dataset,
    test: &Dataset,
    oracle: &OracleClickModel,
) -> Result<(LoggingPolicy, Vec<ClickSession>, Vec<ClickSession>)> {
    let cfg = run.cfg;
    let (policy_p, train_p, test_p) = (
        run.path("policy.json"),
        run.path("sessions_train.jsonl"),
        run.path("sessions_test.jsonl"),
    );
    if run.done("simulate") {
        return Ok((
            load_policy(&policy_p)?,
            read_sessions_jsonl(&train_p)?,
            read_sessions_jsonl(&test_p)?,
        ));
    }
    let policy = build_policy(
        cfg.logging.policy,
        train,
        cfg.logging.label_fraction,
        run.seed(seed::TAG_POLICY),
    )?;
    let train_sessions = simulate_sessions(
        oracle,
        &policy,
        train,
        cfg.sessions_per_query,
        run.seed(seed::TAG_SESSIONS),
    )?;
    let test_sessions = if cfg.test_sessions_per_query > 0 {
        simulate_sessions(
            oracle,
            &policy,
            test,
            cfg.test_sessions_per_query,
            run.seed(seed::TAG_SESSIONS ^ seed::TAG_TEST_DATA),
        )?
    } else {
        Vec::new()
    };
    save_policy(&policy, &policy_p)?;
    write_sessions_jsonl(&train_sessions, &train_p)?;
    write_sessions_jsonl(&test_sessions, &test_p)?;
    run.finish("simulate")?;
    Ok((policy, train_sessions, test_sessions))
}

/// A trained CTR head with its final training AUC.
type TrainedCtr = (CtrModel, Option<f64>);

fn arch_file(a: Architecture) -> String {
    format!("ctr_{}", a.to_string().to_lowercase())
}

/// Trains the configured CTR head (and the other one when comparing
/// architectures). Returns the configured model plus all trained models.
fn stage_ctr(
    run: &mut Run<'_>,
    train: &Dataset,
    sessions: &[ClickSession],
) -> Result<(CtrModel, Vec<TrainedCtr>)> {
    let cfg = run.cfg;
    let mut archs = vec![cfg.ctr.architecture];
    if cfg.compare_architectures {
        for a in [Architecture::A1, Architecture::A2] {
            if !archs.contains(&a) {
                archs.push(a);
            }
        }
    }
    let mut models = Vec::new();
    if run.done("train-ctr") {
        for a in &archs {
            let m = CtrModel::load(run.path(&format!("{}.json", arch_file(*a))))?;
            let rep: CtrTrainReport =
                io::read_json(run.path(&format!("{}_report.json", arch_file(*a))))?;
            let train_auc = rep.epochs.last().and_then(|e| e.train_auc);
            models.push((m, train_auc));
        }
    } else {
        for a in &archs {
            let mut c = cfg.ctr.clone();
            c.architecture = *a;
            c.seed = run.seed(seed::TAG_CTR);
            let (m, rep) = train_ctr_with_k_max(sessions, train, &c, cfg.oracle.k_max)?;
            m.save(run.path(&format!("{}.json", arch_file(*a))))?;
            io::write_text(
                run.path(&format!("{}_report.csv", arch_file(*a))),
                &rep.to_csv(),
            )?;
            io::write_json(run.path(&format!("{}_report.json", arch_file(*a))), &rep)?;
            let train_auc = rep.epochs.last().and_then(|e| e.train_auc);
            models.push((m, train_auc));
        }
        run.finish("train-ctr")?;
    }
    Ok((models[0].0.clone(), models))
}

fn ranker_file(m: Method) -> String {
    format!("ranker_{}", m.name())
}

fn stage_rankers(
    run: &mut Run<'_>,
    train: &Dataset,
    sessions: &[ClickSession],
    oracle: &OracleClickModel,
    ctr_model: &CtrModel,
) -> Result<(
    BTreeMap<Method, ScoringModel>,
    BTreeMap<Method, RankerTrainReport>,
)> {
    let cfg = run.cfg;
    let trained: Vec<Method> = cfg
        .methods
        .iter()
        .copied()
        .filter(|m| {
            matches!(
                m,
                Method::URank | Method::NaiveLambdarank | Method::IpsLambdarankGroundtruth
            )
        })
        .collect();
    let mut models = BTreeMap::new();
    let mut reports = BTreeMap::new();
    if run.done("train-ranker") {
        for m in trained {
            models.insert(
                m,
                ScoringModel::load(run.path(&format!("{}.json", ranker_file(m))))?.0,
            );
            reports.insert(
                m,
                io::read_json(run.path(&format!("{}_report.json", ranker_file(m))))?,
            );
        }
        return Ok((models, reports));
    }
    for m in trained {
        let (model, report) = match m {
            Method::URank => {
                let mut c = cfg.urank.clone();
                c.seed = run.seed(seed::TAG_RANKER);
                ranker::train_urank(train, sessions, ctr_model, cfg.oracle.k_max, &c)?
            }
            Method::NaiveLambdarank => {
                let mut c = cfg.lambdarank.clone();
                c.seed = run.seed(seed::TAG_BASELINE);
                baselines::train_naive_lambdarank(sessions, train, &c)?
            }
            Method::IpsLambdarankGroundtruth => {
                let mut c = cfg.lambdarank.clone();
                c.seed = run.seed(seed::TAG_BASELINE);
                baselines::train_ips_lambdarank(sessions, train, oracle, &c)?
            }
            _ => unreachable!(),
        };
        model.save(run.path(&format!("{}.json", ranker_file(m))), m.name())?;
        io::write_text(
            run.path(&format!("{}_report.csv", ranker_file(m))),
            &report.to_csv(),
        )?;
        io::write_json(
            run.path(&format!("{}_report.json", ranker_file(m))),
            &report,
        )?;
        models.insert(m, model);
        reports.insert(m, report);
    }
    run.finish("train-ranker")?;
    Ok((models, reports))
}

struct EvalInputs<'a> {
    test: &'a Dataset,
    oracle: &'a OracleClickModel,
    policy: &'a LoggingPolicy,
    ctr_model: &'a CtrModel,
    rankers: &'a BTreeMap<Method, ScoringModel>,
    test_sessions: &'a [ClickSession],
    train: &'a Dataset,
    train_sessions: &'a [ClickSession],
    ctr_models: &'a [TrainedCtr],
}

/// Test-set permutation of every query for `method`.
pub fn method_permutations(
    method: Method,
    test: &Dataset,
    oracle: &OracleClickModel,
    policy: &LoggingPolicy,
    ctr_model: &CtrModel,
    rankers: &BTreeMap<Method, ScoringModel>,
    policy_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let k_max = oracle.k_max;
    test.queries
        .iter()
        .enumerate()
        .map(|(qi, q)| match method {
            Method::URank | Method::NaiveLambdarank | Method::IpsLambdarankGroundtruth => {
                let model = rankers.get(&method).ok_or_else(|| {
                    Error::Validation(format!("no trained model for {}", method.name()))
                })?;
                Ok(ranker::rank(model, q))
            }
            Method::CtrAt1 => rank_ctr_at_1(ctr_model, q),
            Method::KmOracle => rank_km(oracle, q, k_max),
            Method::KmEstimated => rank_km(ctr_model, q, k_max),
            Method::LoggingPolicy => Ok(rank_by_policy(
                policy,
                q,
                seed::mix(policy_seed ^ qi as u64),
            )),
        })
        .collect()
}

pub fn method_metrics(
    name: &str,
    test: &Dataset,
    oracle: &OracleClickModel,
    perms: &[Vec<usize>],
    test_sessions: &[ClickSession],
    eval_cfg: &EvalConfig,
) -> Result<MethodMetrics> {
    let util = eval::oracle_utility(oracle, test, perms)?;
    let map = eval::map_metric(test, perms)?;
    let ndcg = eval::ndcg_at_k(test, perms, eval_cfg.ndcg_k)?;
    let debiased = if test_sessions.is_empty() {
        None
    } else {
        Some(eval::debiased_click_at_k(
            test_sessions,
            oracle,
            test,
            perms,
            eval_cfg.top_k,
        )?)
    };
    Ok(MethodMetrics {
        method: name.to_string(),
        clicks_per_query: util.clicks_per_query,
        ctr: util.ctr,
        map: map.value,
        ndcg: ndcg.value,
        relevance_queries_evaluated: map.evaluated,
        relevance_queries_skipped: map.skipped,
        debiased_clicks_at_k: debiased.map(|d| d.clicks_at_k),
        debiased_revenue_at_k: debiased.map(|d| d.revenue_at_k),
        per_query_clicks: util.per_query,
        position_ctr: eval::position_click_distribution(oracle, test, perms)?,
    })
}

fn stage_evaluate(run: &mut Run<'_>, inp: &EvalInputs<'_>) -> Result<EvalReport> {
    let cfg = run.cfg;
    let policy_seed = run.seed(seed::TAG_POLICY ^ seed::TAG_TEST_DATA);
    let mut methods = Vec::new();
    let mut dumps = String::new();
    for &m in &cfg.methods {
        let perms = method_permutations(
            m,
            inp.test,
            inp.oracle,
            inp.policy,
            inp.ctr_model,
            inp.rankers,
            policy_seed,
        )?;
        methods.push(method_metrics(
            m.name(),
            inp.test,
            inp.oracle,
            &perms,
            inp.test_sessions,
            &cfg.eval,
        )?);
        if let Some(q) = inp.test.queries.get(cfg.eval.dump_query) {
            let d = eval::query_dump(inp.oracle, q, &perms[cfg.eval.dump_query], m.name())?;
            writeln!(dumps, "# method={} query_id={}", m.name(), q.query_id).unwrap();
            dumps.push_str(&d.to_csv());
        }
    }

    let mut comparisons = Vec::new();
    if let Some(u) = methods.iter().find(|m| m.method == Method::URank.name()) {
        for other in methods.iter().filter(|m| m.method != u.method) {
            if let Ok(t) = eval::paired_t_test(&u.per_query_clicks, &other.per_query_clicks) {
                comparisons.push(Comparison {
                    method: u.method.clone(),
                    baseline: other.method.clone(),
                    test: t,
                });
            }
        }
    }

    let mut architectures = Vec::new();
    if cfg.compare_architectures {
        for (model, train_auc) in inp.ctr_models {
            let test_auc = if inp.test_sessions.is_empty() {
                None
            } else {
                auc(model, inp.test_sessions, inp.test).ok()
            };
            let mut c = cfg.urank.clone();
            c.seed = run.seed(seed::TAG_RANKER);
            let (scorer, _) =
                ranker::train_urank(inp.train, inp.train_sessions, model, cfg.oracle.k_max, &c)?;
            let perms: Vec<Vec<usize>> = inp
                .test
                .queries
                .iter()
                .map(|q| ranker::rank(&scorer, q))
                .collect();
            architectures.push(ArchitectureRow {
                architecture: model.architecture,
                train_auc: *train_auc,
                test_auc,
                clicks_per_query: eval::oracle_utility(inp.oracle, inp.test, &perms)?
                    .clicks_per_query,
            });
        }
    }

    let report = EvalReport {
        schema_version: io::SCHEMA_VERSION,
        config_hash: run.hash.clone(),
        ctr_denominator: "placed documents (top min(n_q, k_max) of each list)".into(),
        n_test_queries: inp.test.queries.len(),
        top_k: cfg.eval.top_k,
        ndcg_k: cfg.eval.ndcg_k,
        methods,
        comparisons,
        architectures,
    };
    io::write_json(run.path("report.json"), &report)?;
    io::write_text(run.path("report.csv"), &report.to_csv())?;
    io::write_text(run.path("position_ctr.csv"), &report.position_csv())?;
    io::write_text(run.path("query_dump.csv"), &dumps)?;
    if !report.architectures.is_empty() {
        io::write_text(run.path("architectures.csv"), &report.architecture_csv())?;
    }
    run.finish("evaluate")?;
    Ok(report)
}

/// Bound chain on the trained U-rank scorer, with oracle utility tables
/// (monotone by construction) and with the estimated tables recorded during
/// training.
fn stage_bounds(
    run: &mut Run<'_>,
    train: &Dataset,
    sessions: &[ClickSession],
    oracle: &OracleClickModel,
    rankers: &BTreeMap<Method, ScoringModel>,
    reports: &BTreeMap<Method, RankerTrainReport>,
) -> Result<BoundReport> {
    let Some(model) = rankers.get(&Method::URank) else {
        return Ok(BoundReport::default());
    };
    let mut snaps: Vec<BoundSnapshot> = reports
        .get(&Method::URank)
        .map(|r| r.snapshots.clone())
        .unwrap_or_default();
    // Oracle tables are monotone by construction. Pair them with the trained
    // scorer and with its (untrained) initialization, whose small distinct
    // scores give score-consistent states for the regret bound.
    let c = &run.cfg.urank;
    let initial = ScoringModel::new(
        train.feature_dim,
        &c.hidden_sizes,
        c.score_bound,
        c.sigma,
        seed::derive(run.seed(seed::TAG_RANKER), seed::TAG_RANKER),
    );
    let tables = build_utility_tables(sessions, oracle, train, oracle.k_max)?;
    for (m, epoch) in [(&initial, 0), (model, c.epochs)] {
        for (q, t) in train.queries.iter().zip(&tables) {
            snaps.push(BoundSnapshot {
                query_id: q.query_id.clone(),
                epoch,
                scores: m.scores(q),
                positions: ranker::positions_from_order(&ranker::rank(m, q)),
                table: t.clone(),
                sigma: m.sigma,
                score_bound: m.score_bound,
            });
        }
    }
    let report = eval::verify_bounds(&snaps)?;
    io::write_json(run.path("bounds.json"), &report)?;
    io::write_text(run.path("bounds.csv"), &report.to_csv())?;
    run.finish("verify-bounds")?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let c = ExperimentConfig {
            sessions_per_query: 0,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().is_config());
        assert!(ExperimentConfig::from_toml("seed = \"x\"")
            .unwrap_err()
            .is_config());
        assert!(ExperimentConfig::from_toml("unknown_key = 1")
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let c = ExperimentConfig::from_toml(
            "seed = 7\nmethods = [\"km_oracle\"]\n[dataset]\nsource = \"synthetic\"\ntrain_queries = 5\ntest_queries = 2\nn_docs = 4\nfeature_dim = 3\ny_max = 2\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.methods, vec![Method::KmOracle]);
        assert_eq!(c.oracle, OracleConfig::default());
    }
}
