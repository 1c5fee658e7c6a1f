//! `urank` command-line entry point.
//!
//! Exit codes: 0 success, 1 configuration/usage error, 2 stage failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use urank::click::{
    read_sessions_jsonl, simulate_sessions, write_sessions_jsonl, OracleClickModel,
};
use urank::ctr::{train_ctr_with_k_max, Architecture, CtrModel};
use urank::data::parse_letor;
use urank::eval;
use urank::matching::{km_match, parse_csv_matrix};
use urank::pipeline::{self, ExperimentConfig, Method};
use urank::ranker::{self, BoundSnapshot, ScoringModel};
use urank::{baselines, io, Error, Result};

#[derive(Parser)]
#[command(
    name = "urank",
    version,
    about = "Utility-maximizing learning to rank from biased clicks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage from a TOML config.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `output_dir` (also settable via URANK_OUTPUT_DIR).
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Reuse finished stages when the config is unchanged.
        #[arg(long)]
        resume: bool,
    },
    /// Simulate click sessions for a LETOR file.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a CTR model on logged sessions.
    TrainCtr {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long, value_enum)]
        architecture: Option<ArchArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a ranker (u_rank, naive_lambdarank or ips_lambdarank_groundtruth).
    TrainRanker {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: RankerArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sessions: PathBuf,
        /// CTR checkpoint (u_rank).
        #[arg(long)]
        ctr: Option<PathBuf>,
        /// Oracle click model JSON (ips baseline).
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare ranker checkpoints on test data under the oracle click model.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        ndcg_k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimal item-to-position assignment of a CSV weight matrix.
    Match { matrix: PathBuf },
    /// Check the loss bound chain on training snapshots (JSON array).
    VerifyBounds {
        snapshots: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default (or given) configuration as TOML.
    PrintConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    A1,
    A2,
}

#[derive(Clone, Copy, ValueEnum)]
enum RankerArg {
    URank,
    NaiveLambdarank,
    IpsLambdarankGroundtruth,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(cfg.with_env_overrides())
}

fn load_oracle(path: &Path) -> Result<OracleClickModel> {
    let o: OracleClickModel = io::read_json(path)?;
    o.validate()?;
    Ok(o)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run {
            config,
            output_dir,
            seed,
            resume,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.resume |= resume;
            let out = pipeline::run_pipeline(&cfg)?;
            print!("{}", out.report.to_csv());
            for c in &out.report.comparisons {
                println!(
                    "# {} vs {}: mean diff {:.5}, t = {:.3}, p = {:.4}",
                    c.method, c.baseline, c.test.mean_difference, c.test.t, c.test.p_value
                );
            }
            println!(
                "# bounds: {} surrogate / {} regret checks, {} violations",
                out.bounds.checked_surrogate, out.bounds.checked_regret, out.bounds.violations
            );
            info!("artifacts written to {}", cfg.output_dir.display());
        }
        Command::Simulate {
            config,
            data,
            oracle,
            out,
            seed,
        } => {
            let cfg = load_config(config.as_deref())?;
            let oracle = load_oracle(&oracle)?;
            let ds = parse_letor(&data, oracle.w.len(), oracle.y_max)?;
            let master = seed.unwrap_or(cfg.seed);
            let policy = pipeline::build_policy(
                cfg.logging.policy,
                &ds,
                cfg.logging.label_fraction,
                urank::seed::derive(master, urank::seed::TAG_POLICY),
            )?;
            let sessions = simulate_sessions(
                &oracle,
                &policy,
                &ds,
                cfg.sessions_per_query,
                urank::seed::derive(master, urank::seed::TAG_SESSIONS),
            )?;
            write_sessions_jsonl(&sessions, &out)?;
            info!("wrote {} sessions to {}", sessions.len(), out.display());
        }
        Command::TrainCtr {
            config,
            data,
            sessions,
            architecture,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = parse_letor(&data, cfg_feature_dim(&cfg)?, cfg.y_max())?;
            let sessions = read_sessions_jsonl(&sessions)?;
            let mut c = cfg.ctr.clone();
            if let Some(a) = architecture {
                c.architecture = match a {
                    ArchArg::A1 => Architecture::A1,
                    ArchArg::A2 => Architecture::A2,
                };
            }
            let (model, report) = train_ctr_with_k_max(&sessions, &ds, &c, cfg.oracle.k_max)?;
            model.save(&out)?;
            print!("{}", report.to_csv());
        }
        Command::TrainRanker {
            config,
            method,
            data,
            sessions,
            ctr,
            oracle,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = parse_letor(&data, cfg_feature_dim(&cfg)?, cfg.y_max())?;
            let sessions = read_sessions_jsonl(&sessions)?;
            let (model, report, name) = match method {
                RankerArg::URank => {
                    let ctr =
                        ctr.ok_or_else(|| Error::Config("--ctr is required for u_rank".into()))?;
                    let ctr = CtrModel::load(ctr)?;
                    let (m, r) =
                        ranker::train_urank(&ds, &sessions, &ctr, cfg.oracle.k_max, &cfg.urank)?;
                    (m, r, Method::URank.name())
                }
                RankerArg::NaiveLambdarank => {
                    let (m, r) =
                        baselines::train_naive_lambdarank(&sessions, &ds, &cfg.lambdarank)?;
                    (m, r, Method::NaiveLambdarank.name())
                }
                RankerArg::IpsLambdarankGroundtruth => {
                    let o = oracle.ok_or_else(|| {
                        Error::Config("--oracle is required for the ips baseline".into())
                    })?;
                    let o = load_oracle(&o)?;
                    let (m, r) =
                        baselines::train_ips_lambdarank(&sessions, &ds, &o, &cfg.lambdarank)?;
                    (m, r, Method::IpsLambdarankGroundtruth.name())
                }
            };
            model.save(&out, name)?;
            print!("{}", report.to_csv());
        }
        Command::Evaluate {
            data,
            oracle,
            checkpoints,
            ndcg_k,
            out,
        } => {
            let oracle = load_oracle(&oracle)?;
            let ds = parse_letor(&data, oracle.w.len(), oracle.y_max)?;
            let eval_cfg = pipeline::EvalConfig {
                ndcg_k,
                ..Default::default()
            };
            let mut metrics = Vec::new();
            for ck in &checkpoints {
                let (model, method) = ScoringModel::load(ck)?;
                if model.feature_dim != ds.feature_dim {
                    return Err(Error::Config(format!(
                        "{} expects {} features, data has {}",
                        ck.display(),
                        model.feature_dim,
                        ds.feature_dim
                    )));
                }
                let perms: Vec<Vec<usize>> =
                    ds.queries.iter().map(|q| ranker::rank(&model, q)).collect();
                let name = format!("{method}:{}", ck.display());
                metrics.push(pipeline::method_metrics(
                    &name,
                    &ds,
                    &oracle,
                    &perms,
                    &[],
                    &eval_cfg,
                )?);
            }
            println!("method,clicks_per_query,ctr,map,ndcg@{ndcg_k}");
            for m in &metrics {
                println!(
                    "{},{},{},{},{}",
                    m.method, m.clicks_per_query, m.ctr, m.map, m.ndcg
                );
            }
            let mut tests = Vec::new();
            for other in &metrics[1..] {
                let t = eval::paired_t_test(&metrics[0].per_query_clicks, &other.per_query_clicks)?;
                println!(
                    "# {} vs {}: mean diff {:.5}, t = {:.3}, p = {:.4}",
                    metrics[0].method, other.method, t.mean_difference, t.t, t.p_value
                );
                tests.push(pipeline::Comparison {
                    method: metrics[0].method.clone(),
                    baseline: other.method.clone(),
                    test: t,
                });
            }
            if let Some(out) = out {
                io::write_json(
                    &out,
                    &serde_json::json!({ "schema_version": io::SCHEMA_VERSION, "methods": metrics, "comparisons": tests }),
                )?;
            }
        }
        Command::Match { matrix } => {
            let w = parse_csv_matrix(&io::read_text(&matrix)?)?;
            let r = km_match(&w)?;
            println!("item,position");
            for (i, p) in r.assignment.iter().enumerate() {
                match p {
                    Some(p) => println!("{i},{p}"),
                    None => println!("{i},"),
                }
            }
            println!("# total_weight={}", r.total_weight);
        }
        Command::VerifyBounds { snapshots, out } => {
            let snaps: Vec<BoundSnapshot> = io::read_json(&snapshots)?;
            let report = eval::verify_bounds(&snaps)?;
            println!(
                "surrogate checks {}, regret checks {}, skipped non-monotone {}, inconsistent {}, out-of-bound {}, violations {}",
                report.checked_surrogate,
                report.checked_regret,
                report.skipped_non_monotone,
                report.skipped_inconsistent,
                report.skipped_out_of_bound,
                report.violations
            );
            if let Some(out) = out {
                io::write_text(&out, &report.to_csv())?;
            }
            if report.violations > 0 {
                return Err(Error::Validation(format!(
                    "{} bound violations",
                    report.violations
                )));
            }
        }
        Command::PrintConfig { config } => {
            print!("{}", load_config(config.as_deref())?.to_toml());
        }
    }
    Ok(())
}

fn cfg_feature_dim(cfg: &ExperimentConfig) -> Result<usize> {
    match &cfg.dataset {
        pipeline::DatasetSource::Synthetic { feature_dim, .. }
        | pipeline::DatasetSource::Letor { feature_dim, .. } => Ok(*feature_dim),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
