//! Retrieval effectiveness: NDCG, recall, per-query utility, paired
//! significance testing and baseline-bucketed improvement summaries.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{QrelsTable, Query, RankedList};
use crate::error::{Error, Result};

/// Cutoff used for the utility of a rewrite and the rank-sensitive reward.
pub const NDCG_CUTOFF: usize = 10;
/// Cutoff used for the recall component of the reward.
pub const RECALL_CUTOFF: usize = 100;

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    ((rank + 1) as f64).log2()
}

/// NDCG@k with exponential gain `2^grade - 1` and `log2(rank + 1)` discount.
/// Zero when the query has no relevant documents.
pub fn ndcg_at_k(ranking: &RankedList, qrels: &QrelsTable, k: usize) -> f64 {
    let qid = ranking.query_id();
    let Some(judged) = qrels.judgments(qid) else {
        return 0.0;
    };
    let mut ideal: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
    if ideal.is_empty() {
        return 0.0;
    }
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / discount(i + 1))
        .sum();
    let dcg: f64 = ranking
        .doc_ids()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(qrels.grade(qid, d)) / discount(i + 1))
        .sum();
    dcg / idcg
}

/// Fraction of relevant (grade > 0) documents found in the top k.
pub fn recall_at_k(ranking: &RankedList, qrels: &QrelsTable, k: usize) -> f64 {
    let qid = ranking.query_id();
    let relevant = qrels.relevant_count(qid);
    if relevant == 0 {
        return 0.0;
    }
    let found = ranking
        .doc_ids()
        .take(k)
        .filter(|d| qrels.grade(qid, d) > 0)
        .count();
    found as f64 / relevant as f64
}

/// Utility of a rewrite: NDCG@10 of its ranking minus NDCG@10 of the
/// original query's ranking.
pub fn utility_delta(
    candidate: &RankedList,
    baseline: &RankedList,
    qrels: &QrelsTable,
) -> Result<f64> {
    if candidate.query_id() != baseline.query_id() {
        return Err(Error::Invalid(format!(
            "utility compares rankings of different queries (`{}` vs `{}`)",
            candidate.query_id(),
            baseline.query_id()
        )));
    }
    Ok(ndcg_at_k(candidate, qrels, NDCG_CUTOFF) - ndcg_at_k(baseline, qrels, NDCG_CUTOFF))
}

/// Two-tailed paired t-test. Returns 1.0 when every difference is zero.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "paired t-test needs equal lengths ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Invalid(
            "paired t-test needs at least 2 pairs".into(),
        ));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if diffs.iter().all(|&d| d == 0.0) {
        return Ok(1.0);
    }
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if var == 0.0 {
        return Ok(0.0);
    }
    let t = mean / (var / nf).sqrt();
    Ok(student_t_two_tailed(t, nf - 1.0))
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom, via the
/// regularized incomplete beta function.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    statrs::function::beta::beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub ndcg: f64,
    pub recall: f64,
    /// The query has no relevant documents; both metrics are 0.
    pub no_relevant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ndcg_cutoff: usize,
    pub recall_cutoff: usize,
    pub per_query: Vec<QueryMetrics>,
    pub mean_ndcg: f64,
    pub mean_recall: f64,
}

impl MetricReport {
    /// Evaluates one ranking per query, in the order of `queries`. A query
    /// without a ranking is scored as an empty ranking.
    pub fn evaluate(
        queries: &[Query],
        runs: &[RankedList],
        qrels: &QrelsTable,
        ndcg_cutoff: usize,
        recall_cutoff: usize,
    ) -> Self {
        let by_id: HashMap<&str, &RankedList> = runs.iter().map(|r| (r.query_id(), r)).collect();
        let per_query: Vec<QueryMetrics> = queries
            .iter()
            .map(|q| {
                let empty;
                let ranking = match by_id.get(q.query_id.as_str()) {
                    Some(r) => *r,
                    None => {
                        empty = RankedList::empty(q.query_id.clone(), "");
                        &empty
                    }
                };
                QueryMetrics {
                    query_id: q.query_id.clone(),
                    ndcg: ndcg_at_k(ranking, qrels, ndcg_cutoff),
                    recall: recall_at_k(ranking, qrels, recall_cutoff),
                    no_relevant: qrels.relevant_count(&q.query_id) == 0,
                }
            })
            .collect();
        let n = per_query.len().max(1) as f64;
        MetricReport {
            ndcg_cutoff,
            recall_cutoff,
            mean_ndcg: per_query.iter().map(|m| m.ndcg).sum::<f64>() / n,
            mean_recall: per_query.iter().map(|m| m.recall).sum::<f64>() / n,
            per_query,
        }
    }

    pub fn ndcg_scores(&self) -> Vec<f64> {
        self.per_query.iter().map(|m| m.ndcg).collect()
    }

    pub fn recall_scores(&self) -> Vec<f64> {
        self.per_query.iter().map(|m| m.recall).collect()
    }

    /// Tab-separated per-query table followed by an `all` row of means.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "query_id\tndcg@{}\trecall@{}",
            self.ndcg_cutoff, self.recall_cutoff
        )?;
        for m in &self.per_query {
            writeln!(out, "{}\t{:.6}\t{:.6}", m.query_id, m.ndcg, m.recall)?;
        }
        writeln!(out, "all\t{:.6}\t{:.6}", self.mean_ndcg, self.mean_recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub index: usize,
    pub query_ids: Vec<String>,
    pub baseline_min: Option<f64>,
    pub baseline_max: Option<f64>,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub mean: Option<f64>,
}

impl Bucket {
    pub fn count(&self) -> usize {
        self.query_ids.len()
    }
}

/// Groups queries by baseline score into `n_buckets` contiguous equal-count
/// buckets (ascending; the remainder goes to the earliest buckets) and
/// summarizes the improvement distribution in each.
pub fn bucket_report(
    baseline: &HashMap<String, f64>,
    improvements: &HashMap<String, f64>,
    n_buckets: usize,
) -> Result<Vec<Bucket>> {
    if baseline.is_empty() {
        return Err(Error::Invalid(
            "bucket report needs at least one query".into(),
        ));
    }
    if n_buckets == 0 {
        return Err(Error::Invalid("n_buckets must be at least 1".into()));
    }
    if baseline.len() != improvements.len()
        || baseline.keys().any(|q| !improvements.contains_key(q))
    {
        return Err(Error::Invalid(
            "baseline and improvement query sets differ".into(),
        ));
    }
    let mut order: Vec<(&str, f64)> = baseline.iter().map(|(q, &s)| (q.as_str(), s)).collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));

    let n = order.len();
    let (base, rem) = (n / n_buckets, n % n_buckets);
    let mut buckets = Vec::with_capacity(n_buckets);
    let mut start = 0;
    for index in 0..n_buckets {
        let size = base + usize::from(index < rem);
        let members = &order[start..start + size];
        start += size;
        let mut values: Vec<f64> = members.iter().map(|(q, _)| improvements[*q]).collect();
        values.sort_by(f64::total_cmp);
        buckets.push(Bucket {
            index,
            query_ids: members.iter().map(|(q, _)| q.to_string()).collect(),
            baseline_min: members.first().map(|m| m.1),
            baseline_max: members.last().map(|m| m.1),
            median: quantile(&values, 0.5),
            q1: quantile(&values, 0.25),
            q3: quantile(&values, 0.75),
            mean: (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64),
        });
    }
    Ok(buckets)
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> Option<f64> {
    match sorted.len() {
        0 => None,
        1 => Some(sorted[0]),
        n => {
            let h = (n - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
        }
    }
}
