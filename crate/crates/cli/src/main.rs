use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use gprf_cli::config::{ExperimentConfig, Overrides};
use gprf_cli::experiment::{replay, run_pipeline, run_rewrites, Comparison, Manifest, Summary};
use gprf_cli::pipeline::{build_embedder, embed_collection};
use gprf_cli::{run_datafactory, run_experiment, CliError};
use gprf_core::corpus::{load_qrels, load_queries, parse_run, save_run, write_run};
use gprf_core::dense::save_embeddings;
use gprf_core::metrics::{bucket_report, paired_t_test};
use gprf_core::sparse::Analyzer;
use gprf_core::synthetic::{self, SyntheticParams};
use gprf_core::trainer::{check_rollout, RolloutRecord};
use gprf_core::{GrpoConfig, InvertedIndex, MetricReport, QrelsTable, Query, RankedList};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "gprf",
    version,
    about = "Generative pseudo-relevance feedback experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut config = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        config.apply(&self.overrides);
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the seeded synthetic test collection.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SyntheticParams::default().topics)]
        topics: usize,
        #[arg(long, default_value_t = SyntheticParams::default().docs_per_topic)]
        docs_per_topic: usize,
        #[arg(long, default_value_t = SyntheticParams::default().seed)]
        seed: u64,
    },
    /// Build the sparse index and/or document embeddings for a collection.
    Index {
        #[command(flatten)]
        args: ConfigArgs,
        /// Where to write the sparse index.
        #[arg(long)]
        sparse: Option<PathBuf>,
        /// Where to write document embeddings.
        #[arg(long)]
        dense: Option<PathBuf>,
    },
    /// Run the configured pipeline and print or save the TREC run.
    Retrieve {
        #[command(flatten)]
        args: ConfigArgs,
        /// Output run file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate feedback-grounded rewrites as JSONL.
    Rewrite {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a run file against qrels.
    Evaluate {
        /// Run file, or `-` for stdin.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// Query set to average over; all judged queries when omitted.
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Baseline run for paired significance tests and buckets.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        ndcg_k: usize,
        #[arg(long, default_value_t = 100)]
        recall_k: usize,
        #[arg(long, default_value_t = 5)]
        buckets: usize,
        /// Print a JSON summary instead of the per-query table.
        #[arg(long)]
        json: bool,
    },
    /// Run the rejection-sampling data factory.
    Datafactory {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// NDCG improvement of a run over a baseline, bucketed by baseline score.
    BucketReport {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        buckets: usize,
        #[arg(long, default_value_t = 10)]
        ndcg_k: usize,
    },
    /// Recompute rewards, advantages and losses of rollout JSONL.
    GrpoCheck {
        #[arg(long)]
        rollouts: PathBuf,
        #[arg(long, default_value_t = GrpoConfig::default().lambda)]
        lambda: f64,
        #[arg(long, default_value_t = GrpoConfig::default().epsilon)]
        epsilon: f64,
        #[arg(long, default_value_t = GrpoConfig::default().kl_beta)]
        kl_beta: f64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
    /// Run an experiment and write runs, reports and the manifest.
    Experiment {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Re-run every entry of a manifest and compare output digests.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Config(msg) => eprintln!("configuration error: {msg}"),
                CliError::Runtime(err) => eprintln!("error: {err:#}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            Box::new(io::BufWriter::new(
                fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
            ))
        }
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    })
}

fn read_run(path: &Path) -> Result<Vec<RankedList>, CliError> {
    let reader: Box<dyn BufRead> = if path == Path::new("-") {
        Box::new(BufReader::new(io::stdin()))
    } else {
        Box::new(BufReader::new(fs::File::open(path).map_err(|e| {
            CliError::Config(format!("cannot open {}: {e}", path.display()))
        })?))
    };
    Ok(parse_run(reader, &path.display().to_string())?)
}

fn read_qrels(path: &Path) -> Result<QrelsTable, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!(
            "qrels file {} does not exist",
            path.display()
        )));
    }
    Ok(load_qrels(path)?)
}

/// The queries to average over: the given file, else every judged query.
fn query_set(queries: Option<&Path>, qrels: &QrelsTable) -> Result<Vec<Query>, CliError> {
    Ok(match queries {
        Some(p) => load_queries(p)?,
        None => qrels
            .query_ids()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|id| Query {
                query_id: id.to_string(),
                text: String::new(),
            })
            .collect(),
    })
}

fn ndcg_by_query(report: &MetricReport) -> HashMap<String, f64> {
    report
        .per_query
        .iter()
        .map(|m| (m.query_id.clone(), m.ndcg))
        .collect()
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth {
            out,
            topics,
            docs_per_topic,
            seed,
        } => {
            let corpus = synthetic::generate(SyntheticParams {
                topics,
                docs_per_topic,
                seed,
            })
            .map_err(|e| CliError::Config(e.to_string()))?;
            corpus.write(&out)?;
            eprintln!(
                "wrote {} documents and {} queries to {}",
                corpus.collection.len(),
                corpus.queries.len(),
                out.display()
            );
        }
        Command::Index {
            args,
            sparse,
            dense,
        } => {
            let config = args.resolve()?;
            if sparse.is_none() && dense.is_none() {
                return Err(CliError::Config(
                    "give --sparse and/or --dense output paths".into(),
                ));
            }
            let collection =
                gprf_core::corpus::load_collection(&config.data.collection, config.data.format)?;
            if let Some(path) = sparse {
                let index = InvertedIndex::build_with(
                    &collection,
                    Analyzer::with_stopwords(config.data.stopwords.iter()),
                )?;
                index.save(&path)?;
                eprintln!(
                    "sparse index: {} terms -> {}",
                    index.vocabulary_size(),
                    path.display()
                );
            }
            if let Some(path) = dense {
                let embedder = build_embedder(&config)?;
                let store = embed_collection(&*embedder, &collection, &config)?;
                save_embeddings(&path, &store)?;
                eprintln!(
                    "embeddings: {} x {} -> {}",
                    store.len(),
                    store.dim(),
                    path.display()
                );
            }
        }
        Command::Retrieve { args, out } => {
            let config = args.resolve()?;
            let rankings: Vec<RankedList> = run_pipeline(&config)?
                .into_iter()
                .map(|o| o.ranking)
                .collect();
            match out {
                Some(p) => save_run(&p, &rankings)?,
                None => {
                    let mut w = output(None)?;
                    write_run(&mut w, &rankings).context("writing run")?;
                    w.flush().context("writing run")?;
                }
            }
        }
        Command::Rewrite { args, out } => {
            let config = args.resolve()?;
            let outcomes = run_rewrites(&config)?;
            let mut w = output(out.as_deref())?;
            for o in &outcomes {
                serde_json::to_writer(&mut w, o).context("writing rewrites")?;
                writeln!(w).context("writing rewrites")?;
            }
            w.flush().context("writing rewrites")?;
        }
        Command::Evaluate {
            run,
            qrels,
            queries,
            baseline,
            ndcg_k,
            recall_k,
            buckets,
            json,
        } => {
            if ndcg_k == 0 || recall_k == 0 || buckets == 0 {
                return Err(CliError::Config(
                    "cutoffs and bucket count must be at least 1".into(),
                ));
            }
            let qrels = read_qrels(&qrels)?;
            let queries = query_set(queries.as_deref(), &qrels)?;
            let lists = read_run(&run)?;
            let report = MetricReport::evaluate(&queries, &lists, &qrels, ndcg_k, recall_k);
            let versus_baseline = match baseline {
                Some(b) => {
                    let base_lists = read_run(&b)?;
                    let base =
                        MetricReport::evaluate(&queries, &base_lists, &qrels, ndcg_k, recall_k);
                    let base_ndcg = ndcg_by_query(&base);
                    let gains = report
                        .per_query
                        .iter()
                        .map(|m| (m.query_id.clone(), m.ndcg - base_ndcg[&m.query_id]))
                        .collect();
                    Some(Comparison {
                        baseline_tag: base_lists
                            .first()
                            .map(|l| l.tag().to_string())
                            .unwrap_or_default(),
                        baseline_ndcg: base.mean_ndcg,
                        baseline_recall: base.mean_recall,
                        p_ndcg: paired_t_test(&report.ndcg_scores(), &base.ndcg_scores())?,
                        p_recall: paired_t_test(&report.recall_scores(), &base.recall_scores())?,
                        buckets: bucket_report(&base_ndcg, &gains, buckets)?,
                    })
                }
                None => None,
            };
            let mut w = output(None)?;
            if json {
                let summary = Summary {
                    tag: lists
                        .first()
                        .map(|l| l.tag().to_string())
                        .unwrap_or_default(),
                    queries: report.per_query.len(),
                    ndcg_cutoff: ndcg_k,
                    recall_cutoff: recall_k,
                    mean_ndcg: report.mean_ndcg,
                    mean_recall: report.mean_recall,
                    versus_baseline,
                };
                serde_json::to_writer_pretty(&mut w, &summary).context("writing summary")?;
                writeln!(w).context("writing summary")?;
            } else {
                report.write_tsv(&mut w).context("writing report")?;
                if let Some(c) = versus_baseline {
                    eprintln!(
                        "vs {}: ndcg {:.4} -> {:.4} (p = {:.4}), recall {:.4} -> {:.4} (p = {:.4})",
                        c.baseline_tag,
                        c.baseline_ndcg,
                        report.mean_ndcg,
                        c.p_ndcg,
                        c.baseline_recall,
                        report.mean_recall,
                        c.p_recall
                    );
                }
            }
            w.flush().context("writing report")?;
        }
        Command::Datafactory { args } => {
            let config = args.resolve()?;
            let out = run_datafactory(&config)?;
            eprintln!(
                "exported {} records ({} queries failed) -> {}",
                out.records.len(),
                out.failed_queries.len(),
                out.dataset_path.display()
            );
        }
        Command::BucketReport {
            baseline,
            run,
            qrels,
            queries,
            buckets,
            ndcg_k,
        } => {
            if buckets == 0 || ndcg_k == 0 {
                return Err(CliError::Config(
                    "bucket count and cutoff must be at least 1".into(),
                ));
            }
            let qrels = read_qrels(&qrels)?;
            let queries = query_set(queries.as_deref(), &qrels)?;
            let base = MetricReport::evaluate(&queries, &read_run(&baseline)?, &qrels, ndcg_k, 1);
            let system = MetricReport::evaluate(&queries, &read_run(&run)?, &qrels, ndcg_k, 1);
            let base_ndcg = ndcg_by_query(&base);
            let gains = system
                .per_query
                .iter()
                .map(|m| (m.query_id.clone(), m.ndcg - base_ndcg[&m.query_id]))
                .collect();
            let report = bucket_report(&base_ndcg, &gains, buckets)?;
            let mut w = output(None)?;
            serde_json::to_writer_pretty(&mut w, &report).context("writing buckets")?;
            writeln!(w).context("writing buckets")?;
            w.flush().context("writing buckets")?;
        }
        Command::GrpoCheck {
            rollouts,
            lambda,
            epsilon,
            kl_beta,
            tolerance,
        } => {
            let config = GrpoConfig {
                lambda,
                epsilon,
                kl_beta,
            };
            config
                .validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
            let file = fs::File::open(&rollouts).map_err(|e| {
                CliError::Config(format!("cannot open {}: {e}", rollouts.display()))
            })?;
            let mut w = output(None)?;
            writeln!(w, "id\tloss\tmax_error\tstatus").context("writing report")?;
            let mut failures = 0usize;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.context("reading rollouts")?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: RolloutRecord = serde_json::from_str(&line).with_context(|| {
                    format!("{}:{}: malformed rollout", rollouts.display(), n + 1)
                })?;
                let check = check_rollout(&record, &config, tolerance)?;
                let status = if check.ok() { "ok" } else { "MISMATCH" };
                writeln!(
                    w,
                    "{}\t{:.9}\t{:.3e}\t{}",
                    check.id, check.loss, check.max_error, status
                )
                .context("writing report")?;
                for m in &check.mismatches {
                    eprintln!("{}: {m}", check.id);
                }
                failures += usize::from(!check.ok());
            }
            w.flush().context("writing report")?;
            if failures > 0 {
                return Err(anyhow::anyhow!(
                    "{failures} rollout group(s) disagree with recomputed values"
                )
                .into());
            }
        }
        Command::Experiment { args } => {
            let config = args.resolve()?;
            let out = run_experiment(&config)?;
            match &out.summary {
                Some(s) => eprintln!(
                    "{}: ndcg@{} {:.4}, recall@{} {:.4} -> {}",
                    s.tag,
                    s.ndcg_cutoff,
                    s.mean_ndcg,
                    s.recall_cutoff,
                    s.mean_recall,
                    out.run_path.display()
                ),
                None => eprintln!("{} -> {}", out.tag, out.run_path.display()),
            }
        }
        Command::Replay {
            manifest,
            output_dir,
            jobs,
        } => {
            let manifest =
                Manifest::load(&manifest).map_err(|e| CliError::Config(format!("{e:#}")))?;
            let checks = replay(&manifest, &output_dir, jobs)?;
            let mut bad = 0;
            for c in &checks {
                if c.mismatched.is_empty() {
                    eprintln!("{}: reproduced", c.key);
                } else {
                    bad += 1;
                    eprintln!("{}: differs in {}", c.key, c.mismatched.join(", "));
                }
            }
            if bad > 0 {
                return Err(anyhow::anyhow!("{bad} manifest entries did not reproduce").into());
            }
        }
    }
    Ok(())
}
