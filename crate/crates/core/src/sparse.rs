//! Lexical retrieval: tokenization, an in-memory inverted index, BM25
//! scoring and RM3 relevance-model expansion.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::corpus::{Collection, RankedList, ScoredDoc};
use crate::error::{Error, Result};

/// Lowercases and splits on every non-alphanumeric character. No stemming.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Tokenizer plus an optional stopword list.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Analyzer {
    stopwords: BTreeSet<String>,
}

impl Analyzer {
    pub fn with_stopwords<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Analyzer {
            stopwords: words
                .into_iter()
                .flat_map(|w| tokenize(w.as_ref()))
                .collect(),
        }
    }

    pub fn analyze(&self, text: &str) -> Vec<String> {
        let mut tokens = tokenize(text);
        if !self.stopwords.is_empty() {
            tokens.retain(|t| !self.stopwords.contains(t));
        }
        tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 0.9, b: 0.4 }
    }
}

/// Non-negative BM25 idf: `ln((N - df + 0.5) / (df + 0.5) + 1)`.
pub fn bm25_idf(doc_count: usize, df: usize) -> f64 {
    let n = doc_count as f64;
    let df = df as f64;
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

/// One query term's BM25 contribution to a document score.
#[inline]
pub fn bm25_term_score(
    weight: f64,
    idf: f64,
    tf: f64,
    doc_len: f64,
    avg_len: f64,
    p: Bm25Params,
) -> f64 {
    let numerator = tf * (p.k1 + 1.0);
    let denominator = tf + p.k1 * (1.0 - p.b + p.b * doc_len / avg_len);
    weight * idf * numerator / denominator
}

/// A weighted bag of terms. Doubles as a probability distribution `p(t|q)`
/// when its weights are non-negative and sum to one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryTermModel {
    pub weights: BTreeMap<String, f64>,
}

impl QueryTermModel {
    /// Raw term counts of the analyzed text.
    pub fn from_text(analyzer: &Analyzer, text: &str) -> Self {
        let mut weights = BTreeMap::new();
        for t in analyzer.analyze(text) {
            *weights.entry(t).or_insert(0.0) += 1.0;
        }
        QueryTermModel { weights }
    }

    pub fn from_weights<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        QueryTermModel {
            weights: pairs.into_iter().map(|(t, w)| (t.into(), w)).collect(),
        }
    }

    /// Maximum-likelihood distribution: weights divided by their total.
    pub fn to_probability(&self) -> Result<Self> {
        let total: f64 = self.weights.values().sum();
        if !(total > 0.0) || self.weights.values().any(|&w| w < 0.0) {
            return Err(Error::Invalid(
                "query model needs non-negative weights with a positive total".into(),
            ));
        }
        Ok(QueryTermModel {
            weights: self
                .weights
                .iter()
                .map(|(t, w)| (t.clone(), w / total))
                .collect(),
        })
    }

    pub fn is_probability(&self) -> bool {
        let total: f64 = self.weights.values().sum();
        self.weights.values().all(|&w| w >= 0.0) && (total - 1.0).abs() <= 1e-9
    }

    pub fn get(&self, term: &str) -> f64 {
        self.weights.get(term).copied().unwrap_or(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        QueryTermModel {
            weights: self
                .weights
                .iter()
                .map(|(t, w)| (t.clone(), w * factor))
                .collect(),
        }
    }
}

/// The top-k first-stage results used as feedback for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSet {
    pub query_id: String,
    pub docs: Vec<ScoredDoc>,
    pub k: usize,
}

impl FeedbackSet {
    pub fn from_ranking(ranking: &RankedList, k: usize) -> Self {
        FeedbackSet {
            query_id: ranking.query_id().to_string(),
            docs: ranking.entries().iter().take(k).cloned().collect(),
            k,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Rm3Params {
    /// Interpolation weight of the feedback model.
    pub alpha: f64,
    /// Feedback terms kept before interpolation.
    pub n_terms: usize,
    /// Drop original query terms from the feedback model before truncation.
    pub exclude_original: bool,
}

impl Default for Rm3Params {
    fn default() -> Self {
        Rm3Params {
            alpha: 0.5,
            n_terms: 20,
            exclude_original: false,
        }
    }
}

/// Term statistics for BM25 and relevance-model estimation.
///
/// Documents are addressed internally by their position in the source
/// collection; postings lists are in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    analyzer: Analyzer,
    doc_ids: Vec<String>,
    positions: HashMap<String, usize>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    /// Per-document term frequencies (forward index).
    doc_terms: Vec<BTreeMap<String, u32>>,
}

impl InvertedIndex {
    pub fn build(collection: &Collection) -> Result<Self> {
        Self::build_with(collection, Analyzer::default())
    }

    pub fn build_with(collection: &Collection, analyzer: Analyzer) -> Result<Self> {
        if collection.is_empty() {
            return Err(Error::Invalid("cannot index an empty collection".into()));
        }
        let mut doc_ids = Vec::with_capacity(collection.len());
        let mut doc_terms = Vec::with_capacity(collection.len());
        for doc in collection.iter() {
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in analyzer.analyze(&doc.text) {
                *tf.entry(t).or_insert(0) += 1;
            }
            doc_ids.push(doc.doc_id.clone());
            doc_terms.push(tf);
        }
        Ok(Self::from_forward(analyzer, doc_ids, doc_terms))
    }

    fn from_forward(
        analyzer: Analyzer,
        doc_ids: Vec<String>,
        doc_terms: Vec<BTreeMap<String, u32>>,
    ) -> Self {
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(doc_ids.len());
        for (i, terms) in doc_terms.iter().enumerate() {
            doc_lengths.push(terms.values().sum());
            for (t, &tf) in terms {
                postings.entry(t.clone()).or_default().push((i as u32, tf));
            }
        }
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        let avg_doc_length = total as f64 / doc_ids.len() as f64;
        let positions = doc_ids
            .iter()
            .enumerate()
            .map(|(i, d)| (d.clone(), i))
            .collect();
        InvertedIndex {
            analyzer,
            positions,
            doc_ids,
            doc_lengths,
            avg_doc_length,
            postings,
            doc_terms,
        }
    }

    pub fn analyzer(&self) -> &Analyzer {
        &self.analyzer
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn postings(&self, term: &str) -> impl Iterator<Item = (&str, u32)> {
        self.postings
            .get(term)
            .into_iter()
            .flatten()
            .map(|&(d, tf)| (self.doc_ids[d as usize].as_str(), tf))
    }

    fn position(&self, doc_id: &str) -> Option<usize> {
        self.positions.get(doc_id).copied()
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<u32> {
        self.position(doc_id).map(|i| self.doc_lengths[i])
    }

    pub fn doc_term_frequencies(&self, doc_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.position(doc_id).map(|i| &self.doc_terms[i])
    }

    pub fn query_model(&self, text: &str) -> QueryTermModel {
        QueryTermModel::from_text(&self.analyzer, text)
    }

    /// BM25 top-k. Terms are scored in lexicographic order and documents with
    /// a zero score are never returned.
    pub fn search(
        &self,
        query_id: &str,
        model: &QueryTermModel,
        k: usize,
        params: Bm25Params,
    ) -> Result<RankedList> {
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        let n = self.doc_count();
        let mut acc = vec![0.0f64; n];
        let mut touched = vec![false; n];
        for (term, &w) in &model.weights {
            if w == 0.0 {
                continue;
            }
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = bm25_idf(n, list.len());
            for &(d, tf) in list {
                let d = d as usize;
                acc[d] += bm25_term_score(
                    w,
                    idf,
                    f64::from(tf),
                    f64::from(self.doc_lengths[d]),
                    self.avg_doc_length,
                    params,
                );
                touched[d] = true;
            }
        }
        let scored = (0..n)
            .filter(|&d| touched[d] && acc[d] != 0.0)
            .map(|d| ScoredDoc::new(self.doc_ids[d].clone(), acc[d]))
            .collect();
        Ok(RankedList::from_scored(query_id, scored, "bm25")?.truncated(k))
    }

    /// RM3: `p(t|q') = (1-a) p(t|q) + a * sum_d p(t|d) p(d|q)`.
    ///
    /// `p(t|d)` is the maximum-likelihood estimate and `p(d|q)` the feedback
    /// scores shifted to a zero minimum and normalized (uniform when all
    /// scores are equal). The feedback model is cut to its `n_terms` heaviest
    /// terms and renormalized before interpolation.
    pub fn rm3_expand(
        &self,
        original: &QueryTermModel,
        feedback: &FeedbackSet,
        params: Rm3Params,
    ) -> Result<QueryTermModel> {
        let alpha = params.alpha;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Invalid(format!("alpha {alpha} outside [0, 1]")));
        }
        if !original.is_probability() {
            return Err(Error::Invalid(
                "original query model is not a probability model".into(),
            ));
        }
        if feedback.is_empty() {
            return Err(Error::Invalid(format!(
                "empty feedback set for `{}`",
                feedback.query_id
            )));
        }
        if params.n_terms == 0 {
            return Err(Error::Invalid("n_terms must be at least 1".into()));
        }

        let mut usable = Vec::with_capacity(feedback.len());
        for fd in &feedback.docs {
            let i = self.position(&fd.doc_id).ok_or_else(|| {
                Error::Invalid(format!("feedback doc `{}` is not indexed", fd.doc_id))
            })?;
            if self.doc_lengths[i] == 0 {
                warn!(doc_id = %fd.doc_id, query_id = %feedback.query_id, "skipping empty feedback document");
                continue;
            }
            usable.push((i, fd.score));
        }
        if usable.is_empty() {
            return Err(Error::Invalid(format!(
                "all feedback documents for `{}` are empty",
                feedback.query_id
            )));
        }

        let doc_weights = feedback_doc_weights(usable.iter().map(|&(_, s)| s));
        let mut fb: BTreeMap<&str, f64> = BTreeMap::new();
        for (&(i, _), &pd) in usable.iter().zip(&doc_weights) {
            if pd == 0.0 {
                continue;
            }
            let len = f64::from(self.doc_lengths[i]);
            for (t, &tf) in &self.doc_terms[i] {
                *fb.entry(t.as_str()).or_insert(0.0) += f64::from(tf) / len * pd;
            }
        }
        if params.exclude_original {
            fb.retain(|t, _| !original.weights.contains_key(*t));
        }

        let mut ranked: Vec<(&str, f64)> = fb.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(params.n_terms);
        let fb_total: f64 = ranked.iter().map(|(_, w)| w).sum();

        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        for (t, &p) in &original.weights {
            out.insert(t.clone(), (1.0 - alpha) * p);
        }
        if fb_total > 0.0 {
            for (t, w) in ranked {
                *out.entry(t.to_string()).or_insert(0.0) += alpha * (w / fb_total);
            }
        }
        out.retain(|_, w| *w != 0.0);
        Ok(QueryTermModel { weights: out })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_to(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Serializes as JSONL: a versioned header, one line per document, then
    /// one line per term with its postings.
    pub fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let header = IndexHeader {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            doc_count: self.doc_count(),
            avg_doc_length: self.avg_doc_length,
            vocabulary_size: self.vocabulary_size(),
            stopwords: self.analyzer.stopwords.iter().cloned().collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&header)?)?;
        for (id, len) in self.doc_ids.iter().zip(&self.doc_lengths) {
            writeln!(out, "{}", serde_json::json!({ "doc": id, "length": len }))?;
        }
        for (term, list) in &self.postings {
            writeln!(
                out,
                "{}",
                serde_json::json!({ "term": term, "postings": list })
            )?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), &path.display().to_string())
    }

    pub fn read_from<R: BufRead>(reader: R, name: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct DocLine {
            doc: String,
            length: u32,
        }
        #[derive(Deserialize)]
        struct TermLine {
            term: String,
            postings: Vec<(u32, u32)>,
        }

        let mut lines = reader.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(e))) => Err(Error::parse(name, i + 1, e.to_string())),
                None => Err(Error::parse(
                    name,
                    0,
                    format!("unexpected end of file, expected {what}"),
                )),
            }
        };
        let (_, first) = next("header")?;
        let header: IndexHeader =
            serde_json::from_str(&first).map_err(|e| Error::parse(name, 1, e.to_string()))?;
        if header.format != INDEX_FORMAT || header.version != INDEX_VERSION {
            return Err(Error::parse(
                name,
                1,
                format!(
                    "unsupported index format {} v{}",
                    header.format, header.version
                ),
            ));
        }
        let mut doc_ids = Vec::with_capacity(header.doc_count);
        let mut lengths = Vec::with_capacity(header.doc_count);
        for _ in 0..header.doc_count {
            let (n, line) = next("document line")?;
            let d: DocLine =
                serde_json::from_str(&line).map_err(|e| Error::parse(name, n, e.to_string()))?;
            doc_ids.push(d.doc);
            lengths.push(d.length);
        }
        let mut doc_terms = vec![BTreeMap::new(); header.doc_count];
        for _ in 0..header.vocabulary_size {
            let (n, line) = next("term line")?;
            let t: TermLine =
                serde_json::from_str(&line).map_err(|e| Error::parse(name, n, e.to_string()))?;
            for (d, tf) in t.postings {
                let slot = doc_terms.get_mut(d as usize).ok_or_else(|| {
                    Error::parse(name, n, format!("posting for unknown doc #{d}"))
                })?;
                slot.insert(t.term.clone(), tf);
            }
        }
        let index = Self::from_forward(
            Analyzer::with_stopwords(&header.stopwords),
            doc_ids,
            doc_terms,
        );
        if index.doc_lengths != lengths || index.avg_doc_length != header.avg_doc_length {
            return Err(Error::parse(
                name,
                0,
                "index statistics do not match header",
            ));
        }
        Ok(index)
    }
}

const INDEX_FORMAT: &str = "gprf-sparse-index";
const INDEX_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    format: String,
    version: u32,
    doc_count: usize,
    avg_doc_length: f64,
    vocabulary_size: usize,
    #[serde(default)]
    stopwords: Vec<String>,
}

/// `p(d|q)` over the feedback set: scores shifted so the minimum is zero,
/// then divided by their sum. Uniform when all scores are equal.
pub fn feedback_doc_weights<I: IntoIterator<Item = f64>>(scores: I) -> Vec<f64> {
    let scores: Vec<f64> = scores.into_iter().collect();
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = scores.iter().map(|s| s - min).collect();
    let total: f64 = shifted.iter().sum();
    if total > 0.0 {
        shifted.iter().map(|s| s / total).collect()
    } else {
        vec![1.0 / scores.len() as f64; scores.len()]
    }
}
