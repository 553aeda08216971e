//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use gprf_cli::config::{EmbedderKind, FactoryRetriever, RewriterKind};
use gprf_cli::experiment::{replay, Manifest, MANIFEST_FILE};
use gprf_cli::{run_datafactory, run_experiment, ExperimentConfig, Fusion, Method, RetrieverKind};
use gprf_core::corpus::{load_collection, load_qrels, load_queries};
use gprf_core::dense::vprf_refine;
use gprf_core::metrics::{ndcg_at_k, paired_t_test, recall_at_k};
use gprf_core::rewrite::RewriteCandidate;
use gprf_core::synthetic::{generate, SyntheticParams};
use gprf_core::trainer::{compute_advantages, grpo_loss, rejection_sample_best, RolloutSample};
use gprf_core::{
    Bm25Params, Collection, CollectionFormat, Document, EmbedderClient, Embedding, EmbeddingStore,
    FeedbackSet, GrpoConfig, HashingEmbedder, InvertedIndex, QrelsTable, QueryTermModel,
    RankedList, Rm3Params, RolloutGroup, ScoredDoc, SftRecord, Similarity,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, Option<Duration>, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn collection(docs: &[(String, String)]) -> Collection {
    Collection::from_documents(
        docs.iter()
            .map(|(id, text)| Document {
                doc_id: id.clone(),
                text: text.clone(),
            })
            .collect(),
    )
    .unwrap()
}

fn ranking(qid: &str, ids: &[String]) -> RankedList {
    let n = ids.len();
    let entries = ids
        .iter()
        .enumerate()
        .map(|(i, d)| ScoredDoc::new(d.clone(), (n - i) as f64))
        .collect();
    RankedList::new(qid, entries, "t").unwrap()
}

fn ids(list: &RankedList) -> Vec<String> {
    list.doc_ids().map(str::to_string).collect()
}

fn grades_of(qrels: &QrelsTable, qid: &str) -> HashMap<String, u32> {
    qrels
        .judgments(qid)
        .map(|j| j.iter().map(|(d, g)| (d.clone(), *g)).collect())
        .unwrap_or_default()
}

fn c1_metrics() -> Check {
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (grades, ranked) = oracle::random_judged_ranking(&mut r, 20);
        let k = r.random_range(1..=30);
        let mut qrels = QrelsTable::default();
        for (d, g) in &grades {
            qrels.insert("q", d, *g);
        }
        let list = ranking("q", &ranked);
        worst = worst.max((ndcg_at_k(&list, &qrels, k) - oracle::ndcg(&ranked, &grades, k)).abs());
        worst =
            worst.max((recall_at_k(&list, &qrels, k) - oracle::recall(&ranked, &grades, k)).abs());
    }
    ensure!(worst < 1e-9, "max deviation {worst:e}");
    let mut qrels = QrelsTable::default();
    qrels.insert("q", "d1", 3);
    qrels.insert("q", "d2", 1);
    let list = ranking("q", &["d2".into(), "d1".into(), "d3".into()]);
    let got = ndcg_at_k(&list, &qrels, 10);
    let l3 = 3f64.log2();
    let hand = (1.0 + 7.0 / l3) / (7.0 + 1.0 / l3);
    ensure!(
        (got - hand).abs() < 1e-12 && (got - 0.70981).abs() < 5e-6,
        "worked example gave {got}"
    );
    Ok(format!(
        "1000 instances, max |delta| {worst:.1e}; worked example {got:.5}"
    ))
}

fn c2_sparse() -> Check {
    let mut r = rng(2);
    let mut queries = 0;
    for _ in 0..200 {
        let docs = oracle::random_corpus(&mut r, 50, 20);
        let index = InvertedIndex::build(&collection(&docs)).unwrap();
        for _ in 0..5 {
            let q = oracle::random_query(&mut r, 20);
            let k = r.random_range(1..=60);
            let got: Vec<(String, f64)> = index
                .search("q", &index.query_model(&q), k, Bm25Params::default())
                .unwrap()
                .entries()
                .iter()
                .map(|e| (e.doc_id.clone(), e.score))
                .collect();
            ensure!(
                got == oracle::bm25_exhaustive(&docs, &q, 0.9, 0.4, k),
                "mismatch for query `{q}`"
            );
            queries += 1;
        }
    }
    let docs: Vec<(String, String)> = [("d1", "cat sat"), ("d2", "dog sat"), ("d3", "cat cat")]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
    let index = InvertedIndex::build(&collection(&docs)).unwrap();
    let run = index
        .search("q", &index.query_model("cat"), 10, Bm25Params::default())
        .unwrap();
    let scores: Vec<f64> = run.entries().iter().map(|e| e.score).collect();
    ensure!(
        ids(&run) == ["d3", "d1"],
        "worked example ranked {:?}",
        ids(&run)
    );
    ensure!(
        (scores[0] - 0.6159).abs() < 1e-4 && (scores[1] - 0.4700).abs() < 1e-4,
        "worked example scores {scores:?}"
    );
    Ok(format!(
        "200 corpora, {queries} queries bit-identical; worked example [d3, d1] {scores:.4?}"
    ))
}

fn c3_rm3() -> Check {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let docs = oracle::random_corpus(&mut r, 20, 12);
        let index = InvertedIndex::build(&collection(&docs)).unwrap();
        let original = index.query_model(&oracle::random_query(&mut r, 12));
        if original.is_empty() {
            continue;
        }
        let original = original.to_probability().unwrap();
        let k = r.random_range(1..=docs.len());
        let fb: Vec<(String, f64)> = docs
            .iter()
            .take(k)
            .map(|(d, _)| (d.clone(), r.random_range(-5.0..20.0)))
            .collect();
        let fs = FeedbackSet {
            query_id: "q".into(),
            docs: fb
                .iter()
                .map(|(d, s)| ScoredDoc::new(d.clone(), *s))
                .collect(),
            k,
        };
        let n_terms = r.random_range(1..=25);
        let alpha = r.random_range(0.0..=1.0);
        let expand = |alpha| {
            index
                .rm3_expand(
                    &original,
                    &fs,
                    Rm3Params {
                        alpha,
                        n_terms,
                        exclude_original: false,
                    },
                )
                .unwrap()
        };
        let out = expand(alpha);
        worst = worst.max((out.weights.values().sum::<f64>() - 1.0).abs());
        ensure!(expand(0.0) == original, "alpha = 0 changed the query model");
        let pure = expand(1.0);
        let want = oracle::rm3(&docs, &BTreeMap::new(), &fb, 1.0, n_terms);
        ensure!(
            pure.weights.keys().eq(want.keys())
                && want.iter().all(|(t, w)| (pure.get(t) - w).abs() < 1e-12),
            "alpha = 1 differs from the pure feedback model"
        );
    }
    ensure!(worst < 1e-9, "sum deviates from 1 by {worst:e}");
    let docs: Vec<(String, String)> = vec![
        ("d1".into(), "cat sat".into()),
        ("d2".into(), "cat cat".into()),
    ];
    let index = InvertedIndex::build(&collection(&docs)).unwrap();
    let cat = QueryTermModel::from_weights([("cat", 1.0)]);
    let single = |doc: &str| FeedbackSet {
        query_id: "q".into(),
        docs: vec![ScoredDoc::new(doc, 1.0)],
        k: 1,
    };
    let half = index
        .rm3_expand(
            &cat,
            &single("d1"),
            Rm3Params {
                alpha: 0.5,
                ..Default::default()
            },
        )
        .unwrap();
    ensure!(
        half.weights.len() == 2
            && (half.get("cat") - 0.75).abs() < 1e-12
            && (half.get("sat") - 0.25).abs() < 1e-12,
        "worked example gave {:?}",
        half.weights
    );
    let full = index
        .rm3_expand(
            &cat,
            &single("d2"),
            Rm3Params {
                alpha: 1.0,
                ..Default::default()
            },
        )
        .unwrap();
    ensure!(
        full == cat,
        "pure feedback on `cat cat` gave {:?}",
        full.weights
    );
    Ok(format!(
        "500 inputs, max |sum - 1| {worst:.1e}; alpha 0/1 exact; {{cat: 0.75, sat: 0.25}}"
    ))
}

fn c4_vprf() -> Check {
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let dim = r.random_range(1..24);
        let n = r.random_range(1..40);
        let vecs: Vec<(String, Embedding)> = (0..n)
            .map(|i| {
                let v = (0..dim)
                    .map(|_| {
                        r.random_range(0.05..1.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 }
                    })
                    .collect();
                (format!("d{i:02}"), Embedding(v))
            })
            .collect();
        let store = EmbeddingStore::new(vecs.clone(), Similarity::Cosine).unwrap();
        let q = Embedding((0..dim).map(|_| r.random_range(-1.0..1.0)).collect());
        if q.norm() == 0.0 {
            continue;
        }
        let fb: Vec<Embedding> = vecs
            .iter()
            .take(r.random_range(0..=n.min(5)))
            .map(|(_, v)| v.clone())
            .collect();
        let base = store.search("q", &q, n).unwrap();
        for alpha in [1.0, 0.5, 2.0] {
            let refined = vprf_refine(&q, &fb, alpha, 0.0).unwrap();
            ensure!(
                ids(&store.search("q", &refined, n).unwrap()) == ids(&base),
                "beta = 0 moved the ranking"
            );
        }
        let (alpha, beta) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        let got = vprf_refine(&q, &fb, alpha, beta).unwrap();
        for j in 0..dim {
            let mut hand = alpha * q.0[j];
            let mut sum = 0.0;
            for d in &fb {
                sum += d.0[j];
            }
            hand += beta * sum;
            worst = worst.max((got.0[j] - hand).abs());
        }
    }
    ensure!(worst < 1e-12, "refinement deviates by {worst:e}");
    Ok(format!(
        "500 stores, beta = 0 rankings identical; max |delta| {worst:.1e}"
    ))
}

fn on_policy_group(r: &mut ChaCha8Rng) -> RolloutGroup {
    let g = r.random_range(2..8);
    let len = r.random_range(1..10);
    RolloutGroup {
        samples: (0..g)
            .map(|_| {
                let lp: Vec<f64> = (0..len).map(|_| r.random_range(-5.0..-0.01)).collect();
                RolloutSample {
                    reward: r.random_range(0.0..2.0),
                    logp_theta: lp.clone(),
                    logp_old: lp.clone(),
                    logp_ref: lp,
                    ndcg: None,
                    recall: None,
                }
            })
            .collect(),
    }
}

fn c5_grpo() -> Check {
    let mut r = rng(5);
    for _ in 0..1000 {
        let n = r.random_range(2..16);
        let rewards: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let adv = compute_advantages(&rewards).unwrap();
        let nf = n as f64;
        let mean = adv.iter().sum::<f64>() / nf;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / nf).sqrt();
        ensure!(
            mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6,
            "mean {mean}, std {std}"
        );
        let (shift, scale) = (r.random_range(-100.0..100.0), r.random_range(0.01..100.0));
        let moved: Vec<f64> = rewards.iter().map(|x| x * scale + shift).collect();
        let adv2 = compute_advantages(&moved).unwrap();
        ensure!(
            adv.iter().zip(&adv2).all(|(a, b)| (a - b).abs() < 1e-6),
            "not shift/scale invariant"
        );
    }
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let group = on_policy_group(&mut r);
        let adv = compute_advantages(&group.rewards()).unwrap();
        worst = worst.max(
            grpo_loss(&group, &adv, &GrpoConfig::default())
                .unwrap()
                .abs(),
        );
    }
    ensure!(worst < 1e-9, "on-policy loss {worst:e}");

    let one = |theta: f64, old: f64| RolloutSample {
        reward: 0.0,
        logp_theta: vec![theta],
        logp_old: vec![old],
        logp_ref: vec![old],
        ndcg: None,
        recall: None,
    };
    let ln2 = std::f64::consts::LN_2;
    let clip_group = RolloutGroup {
        samples: vec![one(-1.0 + ln2, -1.0), one(-2.0 + ln2, -2.0)],
    };
    let no_kl = GrpoConfig {
        epsilon: 0.2,
        kl_beta: 0.0,
        lambda: 1.0,
    };
    let clip = grpo_loss(&clip_group, &[1.0, -1.0], &no_kl).unwrap();
    ensure!(clip == 0.4, "clip example gave {clip:e}");

    let h = 1e-6;
    let cases: [(f64, [f64; 2], f64); 5] = [
        (1.0, [1.0, -1.0], -1.0),
        (1.0, [-1.0, 1.0], 1.0),
        (1.5, [1.0, -1.0], 0.0),
        (1.5, [-1.0, 1.0], 1.0),
        (0.5, [-1.0, 1.0], 0.0),
    ];
    for (ratio, adv, sign) in cases {
        let old = -1.0;
        let theta = old + ratio.ln();
        let loss = |t: f64| {
            let group = RolloutGroup {
                samples: vec![one(t, old), one(-0.5, -0.5)],
            };
            grpo_loss(&group, &adv, &no_kl).unwrap()
        };
        let d = (loss(theta + h) - loss(theta - h)) / (2.0 * h);
        let ok = if sign == 0.0 {
            d.abs() < 1e-6
        } else {
            d.signum() == sign
        };
        ensure!(
            ok,
            "finite difference at ratio {ratio}, advantages {adv:?}: {d}"
        );
    }
    Ok(format!("1000 groups normalized and invariant; on-policy |L| <= {worst:.1e}; clip example {clip}; 5 FD signs"))
}

fn c6_rejection() -> Check {
    // Exhaustive ties: each candidate puts the single relevant doc at rank
    // 1, at rank 3, or not at all.
    let mut qrels = QrelsTable::default();
    qrels.insert("q", "rel", 1);
    let pattern_list = |level: usize| -> RankedList {
        let docs: Vec<String> = match level {
            0 => vec!["x".into()],
            1 => vec!["x".into(), "y".into(), "rel".into()],
            _ => vec!["rel".into()],
        };
        ranking("q", &docs)
    };
    let baseline = pattern_list(1);
    let mut patterns = 0usize;
    for g in 1..=10usize {
        let levels = if g <= 8 { 3usize } else { 2 };
        let total = levels.pow(g as u32);
        for code in 0..total {
            let mut c = code;
            let cands: Vec<RewriteCandidate> = (0..g)
                .map(|i| {
                    let level = c % levels;
                    c /= levels;
                    RewriteCandidate {
                        text: level.to_string(),
                        sample_index: i,
                        fallback: false,
                    }
                })
                .collect();
            let retrieve = |t: &str| Ok(pattern_list(t.parse().unwrap()));
            let sel = rejection_sample_best(&cands, retrieve, &baseline, &qrels).unwrap();
            let grades = grades_of(&qrels, "q");
            let base = oracle::ndcg(&ids(&baseline), &grades, 10);
            let utils: Vec<f64> = cands
                .iter()
                .map(|c| {
                    oracle::ndcg(&ids(&pattern_list(c.text.parse().unwrap())), &grades, 10) - base
                })
                .collect();
            let max = utils.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let first = utils.iter().position(|&u| u == max).unwrap();
            ensure!(
                sel.best.sample_index == first && utils[sel.best.sample_index] == max,
                "group {code} of size {g}: picked {} instead of {first}",
                sel.best.sample_index
            );
            patterns += 1;
        }
    }

    // Randomized candidate sets over a random collection and random qrels.
    let mut r = rng(6);
    for _ in 0..300 {
        let docs = oracle::random_corpus(&mut r, 30, 10);
        let index = InvertedIndex::build(&collection(&docs)).unwrap();
        let mut qrels = QrelsTable::default();
        for (d, _) in &docs {
            if r.random_bool(0.3) {
                qrels.insert("q", d, r.random_range(1..=3));
            }
        }
        let search =
            |text: &str| index.search("q", &index.query_model(text), 100, Bm25Params::default());
        let baseline = search(&oracle::random_query(&mut r, 10)).unwrap();
        let m = r.random_range(1..=10);
        let cands: Vec<RewriteCandidate> = (0..m)
            .map(|i| RewriteCandidate {
                text: oracle::random_query(&mut r, 10),
                sample_index: i,
                fallback: false,
            })
            .collect();
        let sel = rejection_sample_best(&cands, search, &baseline, &qrels).unwrap();
        let grades = grades_of(&qrels, "q");
        let base = oracle::ndcg(&ids(&baseline), &grades, 10);
        let utils: Vec<f64> = cands
            .iter()
            .map(|c| oracle::ndcg(&ids(&search(&c.text).unwrap()), &grades, 10) - base)
            .collect();
        let max = utils.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ensure!(
            (utils[sel.best.sample_index] - max).abs() < 1e-12,
            "selected utility is not the maximum"
        );
        let first = utils.iter().position(|&u| (u - max).abs() < 1e-12).unwrap();
        ensure!(
            sel.best.sample_index == first,
            "tie not broken to the lowest index"
        );
    }
    Ok(format!(
        "{patterns} exhaustive tie patterns (groups 1..=10) and 300 random sets"
    ))
}

fn synthetic_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic")
}

fn synthetic_config(out: &Path) -> ExperimentConfig {
    let data = synthetic_dir();
    let mut c = ExperimentConfig::default();
    c.data.collection = data.join("collection.tsv");
    c.data.queries = data.join("queries.tsv");
    c.data.qrels = Some(data.join("qrels.txt"));
    c.embedder.kind = EmbedderKind::Hashing;
    c.embedder.dim = 4096;
    c.rewriter.kind = RewriterKind::Oracle;
    c.rewriter.seed = 7;
    c.output_dir = out.to_path_buf();
    c
}

/// Recomputes a record's utility with freshly built retrievers and the
/// oracle metric.
fn recompute_utility(
    record: &SftRecord,
    index: &InvertedIndex,
    store: &EmbeddingStore,
    embedder: &HashingEmbedder,
    qrels: &QrelsTable,
) -> f64 {
    let search = |text: &str| match record.retriever.as_str() {
        "bm25" => index
            .search(
                &record.query_id,
                &index.query_model(text),
                1000,
                Bm25Params::default(),
            )
            .unwrap(),
        "dense" => store
            .search(&record.query_id, &embedder.embed_one(text), 1000)
            .unwrap(),
        other => panic!("unknown retriever {other}"),
    };
    let grades = grades_of(qrels, &record.query_id);
    oracle::ndcg(&ids(&search(&record.target)), &grades, 10)
        - oracle::ndcg(&ids(&search(&record.query)), &grades, 10)
}

fn c7_end_to_end() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = synthetic_dir();
    let bundled = load_collection(&data.join("collection.tsv"), CollectionFormat::Tsv)
        .map_err(|e| e.to_string())?;
    let qrels = load_qrels(&data.join("qrels.txt")).map_err(|e| e.to_string())?;
    let queries = load_queries(&data.join("queries.tsv")).map_err(|e| e.to_string())?;
    ensure!(
        bundled.len() == 200 && queries.len() == 25,
        "bundled corpus has {} docs, {} queries",
        bundled.len(),
        queries.len()
    );
    for q in &queries {
        let j = qrels.judgments(&q.query_id).cloned().unwrap_or_default();
        ensure!(
            j.len() == 1 && j.values().all(|&g| g == 3),
            "{} lacks a single grade-3 judgment",
            q.query_id
        );
    }
    let regenerated = generate(SyntheticParams::default()).map_err(|e| e.to_string())?;
    ensure!(
        regenerated.collection.documents() == bundled.documents(),
        "bundled corpus is stale"
    );

    let mut lines = Vec::new();
    for final_retriever in [RetrieverKind::Bm25, RetrieverKind::Dense] {
        let mut means = Vec::new();
        for method in [Method::None, Method::Gprf] {
            let mut c = synthetic_config(dir.path());
            c.method = method;
            c.final_retriever = final_retriever;
            let out = run_experiment(&c).map_err(|e| e.to_string())?;
            means.push(out.report.unwrap().mean_ndcg);
        }
        ensure!(
            means[1] > means[0],
            "{}: gprf {:.4} is not above none {:.4}",
            final_retriever.as_str(),
            means[1],
            means[0]
        );
        lines.push(format!(
            "{} {:.4} -> {:.4}",
            final_retriever.as_str(),
            means[0],
            means[1]
        ));
    }

    let mut c = synthetic_config(&dir.path().join("factory"));
    c.feedback_noise = 0.5;
    c.noise_seed = 3;
    c.datafactory.min_utility = 0.0;
    c.datafactory.retriever = FactoryRetriever::Alternate;
    c.datafactory.seed = 11;
    let out = run_datafactory(&c).map_err(|e| e.to_string())?;
    let index = InvertedIndex::build(&bundled).unwrap();
    let embedder = HashingEmbedder::new(c.embedder.dim).unwrap();
    let texts: Vec<String> = bundled.iter().map(|d| d.text.clone()).collect();
    let store = EmbeddingStore::new(
        bundled
            .iter()
            .map(|d| d.doc_id.clone())
            .zip(embedder.embed(&texts).unwrap())
            .collect(),
        Similarity::Cosine,
    )
    .unwrap();
    ensure!(!out.records.is_empty(), "no records exported");
    for rec in &out.records {
        let u = recompute_utility(rec, &index, &store, &embedder, &qrels);
        ensure!(
            u > 0.0,
            "{} exported with recomputed utility {u}",
            rec.query_id
        );
        ensure!(
            (u - rec.utility).abs() < 1e-9,
            "{} utility {} vs recomputed {u}",
            rec.query_id,
            rec.utility
        );
    }
    let retrievers: std::collections::BTreeSet<&str> =
        out.records.iter().map(|r| r.retriever.as_str()).collect();
    Ok(format!(
        "NDCG@10 {}; 50% noise: {}/25 exported, all recomputed U > 0 ({:?})",
        lines.join(", "),
        out.records.len(),
        retrievers
    ))
}

fn valid_report(dir: &Path, tag: &str, queries: usize) -> Result<(), String> {
    let tsv =
        fs::read_to_string(dir.join(format!("reports/{tag}.tsv"))).map_err(|e| e.to_string())?;
    let rows: Vec<&str> = tsv.lines().collect();
    ensure!(
        rows.first() == Some(&"query_id\tndcg@10\trecall@100"),
        "bad header in {tag}"
    );
    ensure!(rows.len() == queries + 2, "{tag}: {} rows", rows.len());
    for row in &rows[1..] {
        let cols: Vec<&str> = row.split('\t').collect();
        ensure!(cols.len() == 3, "{tag}: malformed row `{row}`");
        for v in &cols[1..] {
            let x: f64 = v
                .parse()
                .map_err(|_| format!("{tag}: `{v}` is not a number"))?;
            ensure!((0.0..=1.0).contains(&x), "{tag}: {x} outside [0, 1]");
        }
    }
    let json =
        fs::read_to_string(dir.join(format!("reports/{tag}.json"))).map_err(|e| e.to_string())?;
    let v: serde_json::Value = serde_json::from_str(&json).map_err(|e| e.to_string())?;
    ensure!(
        v["mean_ndcg"].is_f64() && v["mean_recall"].is_f64(),
        "{tag}: summary lacks means"
    );
    Ok(())
}

fn c8_cross_model() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cells = Vec::new();
    for fb in [RetrieverKind::Bm25, RetrieverKind::Dense] {
        for fin in [RetrieverKind::Bm25, RetrieverKind::Dense] {
            let mut c = synthetic_config(dir.path());
            c.method = Method::Gprf;
            c.fusion = Fusion::Concat;
            c.feedback_retriever = fb;
            c.final_retriever = fin;
            let out =
                run_experiment(&c).map_err(|e| format!("{}/{}: {e}", fb.as_str(), fin.as_str()))?;
            valid_report(dir.path(), &out.tag, 25)?;
            let s = out.summary.unwrap();
            cells.push(format!(
                "{}->{} {:.3}/{:.3}",
                fb.as_str(),
                fin.as_str(),
                s.mean_ndcg,
                s.mean_recall
            ));
        }
    }
    Ok(format!("NDCG@10/Recall@100: {}", cells.join(", ")))
}

fn c9_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run_all = |out: &Path| -> Result<String, String> {
        let mut c = synthetic_config(out);
        c.rewriter.kind = RewriterKind::Mock;
        c.rewriter.seed = 42;
        c.temperature = 0.8;
        c.method = Method::Gprf;
        c.final_retriever = RetrieverKind::Dense;
        c.fusion = Fusion::DenseAggregate;
        c.jobs = 4;
        let tag = run_experiment(&c).map_err(|e| e.to_string())?.tag;
        c.method = Method::Rm3;
        c.final_retriever = RetrieverKind::Bm25;
        c.feedback_noise = 0.3;
        run_experiment(&c).map_err(|e| e.to_string())?;
        c.feedback_noise = 0.5;
        c.datafactory.retriever = FactoryRetriever::Alternate;
        c.datafactory.min_utility = -1.0;
        run_datafactory(&c).map_err(|e| e.to_string())?;
        Ok(tag)
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let tag = run_all(&a)?;
    run_all(&b)?;
    let files = [
        format!("runs/{tag}.run"),
        "runs/rm3-bm25-bm25.run".to_string(),
        "datasets/sft.jsonl".to_string(),
        "datasets/audit.tsv".to_string(),
        MANIFEST_FILE.to_string(),
    ];
    for f in &files {
        let x = fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure!(
            !x.is_empty() && x == y,
            "{f} differs between identical runs"
        );
    }
    let manifest = Manifest::load(&a.join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
    let checks = replay(&manifest, &dir.path().join("replay"), None).map_err(|e| e.to_string())?;
    ensure!(
        checks.iter().all(|c| c.mismatched.is_empty()),
        "replay mismatch: {checks:?}"
    );
    Ok(format!(
        "{} files byte-identical; {} manifest entries replayed exactly",
        files.len(),
        checks.len()
    ))
}

fn c10_t_test() -> Check {
    let p = paired_t_test(&[0.2, 0.4, 0.6], &[0.1, 0.2, 0.3]).map_err(|e| e.to_string())?;
    ensure!((p - 0.0742).abs() < 1e-3, "p = {p}");
    let same = paired_t_test(&[0.3, 0.5, 0.9], &[0.3, 0.5, 0.9]).map_err(|e| e.to_string())?;
    ensure!(same == 1.0, "identical inputs gave {same}");
    Ok(format!("p = {p:.4}; identical inputs p = {same}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (
            "metric oracle equivalence",
            Some(Duration::from_secs(5)),
            c1_metrics,
        ),
        (
            "sparse oracle equivalence",
            Some(Duration::from_secs(10)),
            c2_sparse,
        ),
        ("RM3 algebra", None, c3_rm3),
        ("VPRF algebra", None, c4_vprf),
        ("GRPO math", None, c5_grpo),
        ("rejection sampling correctness", None, c6_rejection),
        (
            "end-to-end desk-scale improvement",
            Some(Duration::from_secs(60)),
            c7_end_to_end,
        ),
        ("cross-model execution", None, c8_cross_model),
        ("determinism", None, c9_determinism),
        ("significance test", None, c10_t_test),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match (result, budget) {
            (Ok(_), Some(b)) if elapsed > *b => Err(format!("took {elapsed:.2?}, budget {b:?}")),
            (r, _) => r,
        };
        let (status, detail) = match &result {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        failed += usize::from(result.is_err());
        println!("[{status}] {:>2}. {name} ({elapsed:.2?}): {detail}", i + 1);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
