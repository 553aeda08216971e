//! Experiment and data-factory drivers, and the reproducibility manifest.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use gprf_core::corpus::write_run;
use gprf_core::metrics::{bucket_report, paired_t_test, Bucket};
use gprf_core::trainer::{build_sft_dataset, rejection_sample_best};
use gprf_core::{FeedbackSet, MetricReport, Query, RankedList, SftRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use crate::config::{ExperimentConfig, FactoryRetriever, Method, RetrieverKind};
use crate::error::CliError;
use crate::pipeline::{Needs, QueryOutcome, Workspace};

pub const MANIFEST_FILE: &str = "manifest.json";

/// In-process result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub tag: String,
    pub rankings: Vec<RankedList>,
    pub report: Option<MetricReport>,
    pub summary: Option<Summary>,
    pub run_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline_tag: String,
    pub baseline_ndcg: f64,
    pub baseline_recall: f64,
    pub p_ndcg: f64,
    pub p_recall: f64,
    /// NDCG improvement stratified by baseline NDCG.
    pub buckets: Vec<Bucket>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tag: String,
    pub queries: usize,
    pub ndcg_cutoff: usize,
    pub recall_cutoff: usize,
    pub mean_ndcg: f64,
    pub mean_recall: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub versus_baseline: Option<Comparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub rewriter: u64,
    pub noise: u64,
    pub datafactory: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    /// Resolved configuration; `output_dir` is recorded as `.`.
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub inputs: BTreeMap<String, FileDigest>,
    /// Output files relative to the output directory, with SHA-256 digests.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub entries: BTreeMap<String, ManifestEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            entries: BTreeMap::new(),
        }
    }
}

impl Manifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Adds or replaces `entry` in the manifest stored in `dir`.
    fn record(dir: &Path, key: String, entry: ManifestEntry) -> anyhow::Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut manifest = if path.exists() {
            Manifest::load(&path)?
        } else {
            Manifest::default()
        };
        manifest.entries.insert(key, entry);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_file(&path, text.as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Writes `bytes` under the output directory and records its digest.
fn emit(
    dir: &Path,
    rel: &str,
    bytes: &[u8],
    outputs: &mut BTreeMap<String, String>,
) -> anyhow::Result<PathBuf> {
    let path = dir.join(rel);
    write_file(&path, bytes)?;
    outputs.insert(rel.to_string(), sha256_hex(bytes));
    Ok(path)
}

fn input_digests(config: &ExperimentConfig) -> anyhow::Result<BTreeMap<String, FileDigest>> {
    let d = &config.data;
    let mut inputs = BTreeMap::new();
    let mut add = |name: &str, path: &Path| -> anyhow::Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        inputs.insert(
            name.to_string(),
            FileDigest {
                path: path.to_path_buf(),
                sha256: sha256_hex(&bytes),
            },
        );
        Ok(())
    };
    add("collection", &d.collection)?;
    add("queries", &d.queries)?;
    if let Some(p) = &d.qrels {
        add("qrels", p)?;
    }
    if let Some(p) = &d.sparse_index {
        add("sparse_index", p)?;
    }
    if let Some(p) = &d.embeddings {
        add("embeddings", p)?;
    }
    Ok(inputs)
}

fn entry(
    command: &str,
    config: &ExperimentConfig,
    outputs: BTreeMap<String, String>,
) -> anyhow::Result<ManifestEntry> {
    let mut recorded = config.clone();
    recorded.output_dir = PathBuf::from(".");
    Ok(ManifestEntry {
        command: command.to_string(),
        seeds: Seeds {
            rewriter: config.rewriter.seed,
            noise: config.noise_seed,
            datafactory: config.datafactory.seed,
        },
        inputs: input_digests(config)?,
        config: recorded,
        outputs,
    })
}

fn thread_pool(jobs: usize) -> anyhow::Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| anyhow!("cannot start worker pool: {e}"))
}

fn execute(ws: &Workspace, pool: &rayon::ThreadPool) -> anyhow::Result<Vec<QueryOutcome>> {
    pool.install(|| {
        ws.queries
            .par_iter()
            .map(|q| {
                ws.run_query(q)
                    .with_context(|| format!("query `{}`", q.query_id))
            })
            .collect()
    })
}

/// Runs the configured pipeline and returns per-query outcomes in query
/// order, without writing anything.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<Vec<QueryOutcome>, CliError> {
    config.validate()?;
    let needs = Needs {
        qrels: config.rewriter.kind == crate::config::RewriterKind::Oracle,
        ..Needs::for_experiment(config)
    };
    let ws = Workspace::open(config.clone(), needs)?;
    Ok(execute(&ws, &thread_pool(config.jobs)?)?)
}

/// Feedback-grounded rewrites for every query, without retrieval with them.
pub fn run_rewrites(config: &ExperimentConfig) -> Result<Vec<QueryOutcome>, CliError> {
    config.validate()?;
    let needs = Needs {
        sparse: config.feedback_retriever == RetrieverKind::Bm25,
        dense: config.feedback_retriever == RetrieverKind::Dense,
        rewriter: true,
        qrels: config.rewriter.kind == crate::config::RewriterKind::Oracle,
    };
    let ws = Workspace::open(config.clone(), needs)?;
    let pool = thread_pool(config.jobs)?;
    Ok(pool.install(|| {
        ws.queries
            .par_iter()
            .map(|q| {
                let fb = ws.feedback(config.feedback_retriever, q)?;
                Ok(QueryOutcome {
                    query_id: q.query_id.clone(),
                    ranking: RankedList::empty(q.query_id.clone(), ""),
                    feedback: fb.docs.iter().map(|d| d.doc_id.clone()).collect(),
                    candidates: ws.rewrites(q, &fb)?,
                })
            })
            .collect::<anyhow::Result<_>>()
    })?)
}

/// Runs the configured retrieval pipeline over every query and writes the
/// run file, metric reports and a manifest entry under `output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput, CliError> {
    config.validate()?;
    let ws = Workspace::open(config.clone(), Needs::for_experiment(config))?;
    let tag = config.tag();
    info!(%tag, method = config.method.as_str(), "running experiment");

    let pool = thread_pool(config.jobs)?;
    let outcomes = execute(&ws, &pool)?;
    let rankings: Vec<RankedList> = outcomes.iter().map(|o| o.ranking.clone()).collect();

    let dir = &config.output_dir;
    let mut outputs = BTreeMap::new();
    let mut run_bytes = Vec::new();
    write_run(&mut run_bytes, &rankings).context("serializing run")?;
    let run_path = emit(dir, &format!("runs/{tag}.run"), &run_bytes, &mut outputs)?;

    if config.method != Method::None {
        let mut trace = String::new();
        for o in &outcomes {
            trace.push_str(&serde_json::to_string(o).context("serializing feedback trace")?);
            trace.push('\n');
        }
        emit(
            dir,
            &format!("runs/{tag}.feedback.jsonl"),
            trace.as_bytes(),
            &mut outputs,
        )?;
    }

    let (report, summary) = match &ws.qrels {
        Some(qrels) => {
            let m = &config.metrics;
            let report =
                MetricReport::evaluate(&ws.queries, &rankings, qrels, m.ndcg_k, m.recall_k);
            let versus_baseline = if config.method != Method::None {
                let baseline: Vec<RankedList> = pool.install(|| {
                    ws.queries
                        .par_iter()
                        .map(|q| {
                            Ok(ws
                                .retrieve(config.final_retriever, q, config.depth)?
                                .quantized())
                        })
                        .collect::<anyhow::Result<_>>()
                })?;
                Some(compare(&ws.queries, &baseline, &report, qrels, config)?)
            } else {
                None
            };
            let mut tsv = Vec::new();
            report.write_tsv(&mut tsv).context("serializing report")?;
            emit(dir, &format!("reports/{tag}.tsv"), &tsv, &mut outputs)?;
            let summary = Summary {
                tag: tag.clone(),
                queries: report.per_query.len(),
                ndcg_cutoff: report.ndcg_cutoff,
                recall_cutoff: report.recall_cutoff,
                mean_ndcg: report.mean_ndcg,
                mean_recall: report.mean_recall,
                versus_baseline,
            };
            let mut json = serde_json::to_string_pretty(&summary).context("serializing summary")?;
            json.push('\n');
            emit(
                dir,
                &format!("reports/{tag}.json"),
                json.as_bytes(),
                &mut outputs,
            )?;
            info!(%tag, ndcg = report.mean_ndcg, recall = report.mean_recall, "evaluated");
            (Some(report), Some(summary))
        }
        None => (None, None),
    };

    Manifest::record(
        dir,
        format!("experiment/{tag}"),
        entry("experiment", config, outputs)?,
    )?;
    Ok(ExperimentOutput {
        tag,
        rankings,
        report,
        summary,
        run_path,
    })
}

fn compare(
    queries: &[Query],
    baseline: &[RankedList],
    report: &MetricReport,
    qrels: &gprf_core::QrelsTable,
    config: &ExperimentConfig,
) -> anyhow::Result<Comparison> {
    let m = &config.metrics;
    let base = MetricReport::evaluate(queries, baseline, qrels, m.ndcg_k, m.recall_k);
    let base_ndcg: HashMap<String, f64> = base
        .per_query
        .iter()
        .map(|q| (q.query_id.clone(), q.ndcg))
        .collect();
    let gains: HashMap<String, f64> = report
        .per_query
        .iter()
        .map(|q| (q.query_id.clone(), q.ndcg - base_ndcg[&q.query_id]))
        .collect();
    let buckets = if queries.is_empty() {
        Vec::new()
    } else {
        bucket_report(&base_ndcg, &gains, m.buckets)?
    };
    Ok(Comparison {
        baseline_tag: format!("none-{}", config.final_retriever.as_str()),
        baseline_ndcg: base.mean_ndcg,
        baseline_recall: base.mean_recall,
        p_ndcg: paired_t_test(&report.ndcg_scores(), &base.ndcg_scores())?,
        p_recall: paired_t_test(&report.recall_scores(), &base.recall_scores())?,
        buckets,
    })
}

/// One candidate line of the utility audit.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub query_id: String,
    pub retriever: String,
    pub sample_index: usize,
    pub utility: f64,
    pub selected: bool,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct DataFactoryOutput {
    /// Exported records after filtering, in export order.
    pub records: Vec<SftRecord>,
    pub audit: Vec<AuditRow>,
    pub failed_queries: Vec<String>,
    pub dataset_path: PathBuf,
}

/// Per-query retriever for data generation.
pub fn factory_retriever(config: &ExperimentConfig, query_id: &str) -> RetrieverKind {
    match config.datafactory.retriever {
        FactoryRetriever::Bm25 => RetrieverKind::Bm25,
        FactoryRetriever::Dense => RetrieverKind::Dense,
        FactoryRetriever::Alternate => {
            let digest = Sha256::digest(query_id.as_bytes());
            let mut word = [0u8; 8];
            word.copy_from_slice(&digest[..8]);
            let mut rng =
                ChaCha8Rng::seed_from_u64(config.datafactory.seed ^ u64::from_le_bytes(word));
            if rng.random_bool(0.5) {
                RetrieverKind::Bm25
            } else {
                RetrieverKind::Dense
            }
        }
    }
}

struct FactoryItem {
    record: SftRecord,
    audit: Vec<AuditRow>,
}

fn factory_query(ws: &Workspace, query: &Query) -> anyhow::Result<FactoryItem> {
    let c = &ws.config;
    let qrels = ws.qrels()?;
    let kind = factory_retriever(c, &query.query_id);
    let baseline = ws.retrieve(kind, query, c.depth)?;
    let feedback = FeedbackSet::from_ranking(&baseline, c.k);
    let feedback = if c.feedback_noise > 0.0 {
        gprf_core::synthetic::replace_with_random(
            &feedback,
            &ws.collection,
            c.feedback_noise,
            c.noise_seed,
        )?
    } else {
        feedback
    };
    let passages = ws.prompt_passages(&feedback)?;
    let candidates = ws.rewrites(query, &feedback)?;
    let retrieve = |text: &str| -> gprf_core::Result<RankedList> {
        let q = Query {
            query_id: query.query_id.clone(),
            text: text.to_string(),
        };
        ws.retrieve(kind, &q, c.depth)
            .map_err(|e| gprf_core::Error::client(format!("{e:#}")))
    };
    let selection = rejection_sample_best(&candidates, retrieve, &baseline, qrels)?;
    let best_utility = selection
        .utilities
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if best_utility == f64::NEG_INFINITY {
        return Err(anyhow!("every candidate retrieval failed"));
    }
    let mut ordered: Vec<_> = candidates.iter().collect();
    ordered.sort_by_key(|c| c.sample_index);
    let audit = ordered
        .iter()
        .zip(&selection.utilities)
        .map(|(cand, &u)| AuditRow {
            query_id: query.query_id.clone(),
            retriever: kind.as_str().to_string(),
            sample_index: cand.sample_index,
            utility: u,
            selected: cand.sample_index == selection.best.sample_index,
            text: cand.text.clone(),
        })
        .collect();
    Ok(FactoryItem {
        record: SftRecord {
            query_id: query.query_id.clone(),
            instruction: ws.template.instruction.clone(),
            query: query.text.clone(),
            passages,
            target: selection.best.text,
            utility: best_utility,
            retriever: kind.as_str().to_string(),
        },
        audit,
    })
}

/// Rejection-sampling data generation: for each query, samples `m`
/// rewrites, scores them by utility and keeps the best one. Writes
/// `datasets/sft.jsonl` and `datasets/audit.tsv`.
pub fn run_datafactory(config: &ExperimentConfig) -> Result<DataFactoryOutput, CliError> {
    config.validate()?;
    if config.data.qrels.is_none() {
        return Err(CliError::Config("datafactory requires data.qrels".into()));
    }
    let needs = Needs {
        sparse: config.datafactory.retriever != FactoryRetriever::Dense,
        dense: config.datafactory.retriever != FactoryRetriever::Bm25,
        rewriter: true,
        qrels: true,
    };
    let ws = Workspace::open(config.clone(), needs)?;
    let pool = thread_pool(config.jobs)?;
    let results: Vec<anyhow::Result<FactoryItem>> = pool.install(|| {
        ws.queries
            .par_iter()
            .map(|q| factory_query(&ws, q))
            .collect()
    });

    let mut records = Vec::new();
    let mut audit = Vec::new();
    let mut failed_queries = Vec::new();
    for (q, r) in ws.queries.iter().zip(results) {
        match r {
            Ok(item) => {
                records.push(item.record);
                audit.extend(item.audit);
            }
            Err(e) => {
                warn!(query_id = %q.query_id, error = %format!("{e:#}"), "skipping query");
                failed_queries.push(q.query_id.clone());
            }
        }
    }
    if !ws.queries.is_empty() && failed_queries.len() == ws.queries.len() {
        return Err(anyhow!("all {} queries failed", ws.queries.len()).into());
    }
    let generated = records.len();
    let records = build_sft_dataset(
        records,
        config.datafactory.top_n,
        config.datafactory.min_utility,
    );
    info!(
        generated,
        exported = records.len(),
        failed = failed_queries.len(),
        "data factory finished"
    );

    let dir = &config.output_dir;
    let mut outputs = BTreeMap::new();
    let mut jsonl = String::new();
    for r in &records {
        jsonl.push_str(&serde_json::to_string(r).context("serializing record")?);
        jsonl.push('\n');
    }
    let dataset_path = emit(dir, "datasets/sft.jsonl", jsonl.as_bytes(), &mut outputs)?;
    let mut tsv = String::from("query_id\tretriever\tsample_index\tutility\tselected\tcandidate\n");
    for a in &audit {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{}\t{}\n",
            a.query_id,
            a.retriever,
            a.sample_index,
            a.utility,
            u8::from(a.selected),
            gprf_core::rewrite::flatten(&a.text).replace('\t', " ")
        ));
    }
    emit(dir, "datasets/audit.tsv", tsv.as_bytes(), &mut outputs)?;
    Manifest::record(
        dir,
        "datafactory".to_string(),
        entry("datafactory", config, outputs)?,
    )?;
    Ok(DataFactoryOutput {
        records,
        audit,
        failed_queries,
        dataset_path,
    })
}

/// Result of replaying one manifest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayCheck {
    pub key: String,
    pub mismatched: Vec<String>,
}

/// Re-runs every manifest entry into `output_dir` and compares the
/// produced files with the recorded digests.
pub fn replay(
    manifest: &Manifest,
    output_dir: &Path,
    jobs: Option<usize>,
) -> Result<Vec<ReplayCheck>, CliError> {
    let mut checks = Vec::new();
    for (key, e) in &manifest.entries {
        let mut config = e.config.clone();
        config.output_dir = output_dir.to_path_buf();
        if let Some(j) = jobs {
            config.jobs = j;
        }
        for (name, input) in &e.inputs {
            let bytes = fs::read(&input.path).map_err(|err| {
                CliError::Config(format!("input {}: {err}", input.path.display()))
            })?;
            if sha256_hex(&bytes) != input.sha256 {
                warn!(input = %name, path = %input.path.display(), "input digest differs from manifest");
            }
        }
        match e.command.as_str() {
            "experiment" => {
                run_experiment(&config)?;
            }
            "datafactory" => {
                run_datafactory(&config)?;
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown manifest command `{other}`"
                )))
            }
        }
        let mut mismatched = Vec::new();
        for (rel, digest) in &e.outputs {
            let path = output_dir.join(rel);
            let ok = fs::read(&path)
                .map(|b| sha256_hex(&b) == *digest)
                .unwrap_or(false);
            if !ok {
                mismatched.push(rel.clone());
            }
        }
        checks.push(ReplayCheck {
            key: key.clone(),
            mismatched,
        });
    }
    Ok(checks)
}
