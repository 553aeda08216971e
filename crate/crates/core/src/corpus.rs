//! Collections, queries, relevance judgments and TREC run files.
//!
//! Everything loaded here is immutable after construction. Rankings are the
//! common currency between retrieval, fusion and evaluation, so
//! [`RankedList`] enforces its ordering invariant on every construction path:
//! scores descending, ties by `doc_id` ascending, no duplicate documents.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
}

impl Query {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let query = Query {
            query_id: query_id.into(),
            text: text.into(),
        };
        if query.text.trim().is_empty() {
            return Err(Error::Invalid(format!(
                "query `{}` has empty text",
                query.query_id
            )));
        }
        Ok(query)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollectionFormat {
    #[default]
    Tsv,
    Jsonl,
}

impl std::str::FromStr for CollectionFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(CollectionFormat::Tsv),
            "jsonl" => Ok(CollectionFormat::Jsonl),
            other => Err(Error::Config(format!(
                "unknown collection format `{other}`"
            ))),
        }
    }
}

/// A document collection with unique ids, in file order.
#[derive(Debug, Clone, Default)]
pub struct Collection {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Collection {
    pub fn from_documents(docs: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, doc) in docs.iter().enumerate() {
            if doc.doc_id.is_empty() {
                return Err(Error::Invalid(format!(
                    "document #{} has an empty id",
                    i + 1
                )));
            }
            if by_id.insert(doc.doc_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(doc.doc_id.clone()));
            }
        }
        Ok(Collection { docs, by_id })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Document> {
        self.docs.iter()
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn read_lines<R: BufRead>(reader: R, name: &str) -> Result<Vec<(usize, String)>> {
    reader
        .lines()
        .enumerate()
        .map(|(i, line)| {
            line.map(|l| (i + 1, l))
                .map_err(|e| Error::parse(name, i + 1, e.to_string()))
        })
        .collect()
}

pub fn load_collection(path: &Path, format: CollectionFormat) -> Result<Collection> {
    let collection = parse_collection(open(path)?, format, &path.display().to_string())?;
    tracing::info!(path = %path.display(), count = collection.len(), "loaded collection");
    Ok(collection)
}

pub fn parse_collection<R: BufRead>(
    reader: R,
    format: CollectionFormat,
    name: &str,
) -> Result<Collection> {
    #[derive(Deserialize)]
    struct JsonDoc {
        doc_id: String,
        text: String,
    }

    let mut docs = Vec::new();
    for (lineno, line) in read_lines(reader, name)? {
        if line.trim().is_empty() {
            continue;
        }
        let doc = match format {
            CollectionFormat::Tsv => {
                let (id, text) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::parse(name, lineno, "expected `doc_id<TAB>text`"))?;
                Document {
                    doc_id: id.to_string(),
                    text: text.to_string(),
                }
            }
            CollectionFormat::Jsonl => {
                let doc: JsonDoc = serde_json::from_str(&line)
                    .map_err(|e| Error::parse(name, lineno, e.to_string()))?;
                Document {
                    doc_id: doc.doc_id,
                    text: doc.text,
                }
            }
        };
        if doc.doc_id.is_empty() {
            return Err(Error::parse(name, lineno, "empty doc_id"));
        }
        docs.push(doc);
    }
    Collection::from_documents(docs)
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    parse_queries(open(path)?, &path.display().to_string())
}

pub fn parse_queries<R: BufRead>(reader: R, name: &str) -> Result<Vec<Query>> {
    let mut seen = HashSet::new();
    let mut queries = Vec::new();
    for (lineno, line) in read_lines(reader, name)? {
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(name, lineno, "expected `query_id<TAB>text`"))?;
        let query = Query::new(id, text).map_err(|e| Error::parse(name, lineno, e.to_string()))?;
        if !seen.insert(query.query_id.clone()) {
            return Err(Error::DuplicateId(query.query_id));
        }
        queries.push(query);
    }
    Ok(queries)
}

/// Graded relevance judgments. Absent pairs have grade 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QrelsTable {
    entries: BTreeMap<String, BTreeMap<String, u32>>,
}

/// A non-fatal issue found while parsing qrels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QrelsWarning {
    pub line: usize,
    pub query_id: String,
    pub doc_id: String,
    pub previous: u32,
    pub grade: u32,
}

impl QrelsTable {
    /// Sets a grade, returning the previous one if the pair was already judged.
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) -> Option<u32> {
        self.entries
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade)
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.entries
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    /// All judgments for a query (including grade-0 entries).
    pub fn judgments(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.entries.get(query_id)
    }

    pub fn relevant_count(&self, query_id: &str) -> usize {
        self.judgments(query_id)
            .map(|m| m.values().filter(|&&g| g > 0).count())
            .unwrap_or(0)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn load_qrels(path: &Path) -> Result<QrelsTable> {
    let (table, warnings) = parse_qrels(open(path)?, &path.display().to_string())?;
    for w in &warnings {
        warn!(
            line = w.line,
            query_id = %w.query_id,
            doc_id = %w.doc_id,
            previous = w.previous,
            grade = w.grade,
            "duplicate qrels pair, keeping the later grade"
        );
    }
    Ok(table)
}

/// Parses TREC qrels (`query_id iter doc_id grade`). Duplicate pairs are
/// last-wins; each overwrite is reported as a warning.
pub fn parse_qrels<R: BufRead>(reader: R, name: &str) -> Result<(QrelsTable, Vec<QrelsWarning>)> {
    let mut table = QrelsTable::default();
    let mut warnings = Vec::new();
    for (lineno, line) in read_lines(reader, name)? {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        if cols.len() != 4 {
            return Err(Error::parse(
                name,
                lineno,
                format!("expected 4 columns, found {}", cols.len()),
            ));
        }
        let grade: u32 = cols[3].parse().map_err(|_| {
            Error::parse(
                name,
                lineno,
                format!("grade `{}` is not a non-negative integer", cols[3]),
            )
        })?;
        if let Some(previous) = table.insert(cols[0], cols[2], grade) {
            warnings.push(QrelsWarning {
                line: lineno,
                query_id: cols[0].to_string(),
                doc_id: cols[2].to_string(),
                previous,
                grade,
            });
        }
    }
    Ok((table, warnings))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

impl ScoredDoc {
    pub fn new(doc_id: impl Into<String>, score: f64) -> Self {
        ScoredDoc {
            doc_id: doc_id.into(),
            score,
        }
    }
}

/// Ranking order: higher score first, then lexicographically smaller doc id.
pub fn rank_order(a: &ScoredDoc, b: &ScoredDoc) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

/// The ranked results of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    query_id: String,
    entries: Vec<ScoredDoc>,
    tag: String,
}

impl RankedList {
    /// Validating constructor: entries must already be in ranking order.
    pub fn new(
        query_id: impl Into<String>,
        entries: Vec<ScoredDoc>,
        tag: impl Into<String>,
    ) -> Result<Self> {
        let list = RankedList {
            query_id: query_id.into(),
            entries,
            tag: tag.into(),
        };
        list.check()?;
        Ok(list)
    }

    /// Sorts arbitrary scored documents into ranking order.
    pub fn from_scored(
        query_id: impl Into<String>,
        mut entries: Vec<ScoredDoc>,
        tag: impl Into<String>,
    ) -> Result<Self> {
        if let Some(bad) = entries.iter().find(|e| e.score.is_nan()) {
            return Err(Error::Invalid(format!("NaN score for `{}`", bad.doc_id)));
        }
        entries.sort_by(rank_order);
        Self::new(query_id, entries, tag)
    }

    pub fn empty(query_id: impl Into<String>, tag: impl Into<String>) -> Self {
        RankedList {
            query_id: query_id.into(),
            entries: Vec::new(),
            tag: tag.into(),
        }
    }

    fn check(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.score.is_nan() {
                return Err(Error::Invalid(format!("NaN score for `{}`", e.doc_id)));
            }
            if !seen.insert(e.doc_id.as_str()) {
                return Err(Error::DuplicateId(e.doc_id.clone()));
            }
        }
        if let Some(w) = self
            .entries
            .windows(2)
            .find(|w| rank_order(&w[0], &w[1]) == Ordering::Greater)
        {
            return Err(Error::Invalid(format!(
                "ranking for `{}` out of order at `{}` ({}) / `{}` ({})",
                self.query_id, w[0].doc_id, w[0].score, w[1].doc_id, w[1].score
            )));
        }
        Ok(())
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn entries(&self) -> &[ScoredDoc] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    pub fn truncated(mut self, k: usize) -> Self {
        self.entries.truncate(k);
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    /// Rounds scores to the run-file precision and restores ranking order,
    /// giving exactly the list that a write/read cycle produces.
    pub fn quantized(self) -> Self {
        let entries = self
            .entries
            .into_iter()
            .map(|e| ScoredDoc {
                score: quantize_score(e.score),
                doc_id: e.doc_id,
            })
            .collect::<Vec<_>>();
        let mut list = RankedList {
            query_id: self.query_id,
            entries,
            tag: self.tag,
        };
        list.entries.sort_by(rank_order);
        list
    }
}

/// Number of decimal places used for scores in run files.
pub const RUN_SCORE_DECIMALS: usize = 6;

fn quantize_score(score: f64) -> f64 {
    format!("{score:.RUN_SCORE_DECIMALS$}")
        .parse()
        .expect("formatted float parses")
}

/// Writes rankings in TREC run format. Scores are quantized first, so the
/// file is always in canonical order.
pub fn write_run<W: Write>(mut out: W, lists: &[RankedList]) -> std::io::Result<()> {
    for list in lists {
        let list = list.clone().quantized();
        for (rank, e) in list.entries.iter().enumerate() {
            writeln!(
                out,
                "{} Q0 {} {} {:.RUN_SCORE_DECIMALS$} {}",
                list.query_id,
                e.doc_id,
                rank + 1,
                e.score,
                list.tag
            )?;
        }
    }
    Ok(())
}

pub fn save_run(path: &Path, lists: &[RankedList]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_run(&mut out, lists).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_run(path: &Path) -> Result<Vec<RankedList>> {
    parse_run(open(path)?, &path.display().to_string())
}

/// Parses a TREC run file into one list per query, in order of first
/// appearance. Ranks must count up from 1 in line order for each query.
pub fn parse_run<R: BufRead>(reader: R, name: &str) -> Result<Vec<RankedList>> {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, (Vec<ScoredDoc>, String)> = HashMap::new();
    for (lineno, line) in read_lines(reader, name)? {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        if cols.len() != 6 {
            return Err(Error::parse(
                name,
                lineno,
                format!("expected 6 columns, found {}", cols.len()),
            ));
        }
        let rank: usize = cols[3]
            .parse()
            .map_err(|_| Error::parse(name, lineno, format!("bad rank `{}`", cols[3])))?;
        let score: f64 = cols[4]
            .parse()
            .map_err(|_| Error::parse(name, lineno, format!("bad score `{}`", cols[4])))?;
        if !score.is_finite() {
            return Err(Error::parse(name, lineno, "score is not finite"));
        }
        let (entries, tag) = grouped.entry(cols[0].to_string()).or_insert_with(|| {
            order.push(cols[0].to_string());
            (Vec::new(), cols[5].to_string())
        });
        if rank != entries.len() + 1 {
            return Err(Error::parse(
                name,
                lineno,
                format!(
                    "rank {rank} inconsistent with line order (expected {})",
                    entries.len() + 1
                ),
            ));
        }
        if tag != cols[5] {
            return Err(Error::parse(
                name,
                lineno,
                format!("run tag `{}` differs from `{tag}`", cols[5]),
            ));
        }
        entries.push(ScoredDoc::new(cols[2], score));
    }
    order
        .into_iter()
        .map(|qid| {
            let (entries, tag) = grouped.remove(&qid).expect("grouped by id");
            RankedList::new(qid.clone(), entries, tag)
                .map_err(|e| Error::parse(name, 0, format!("query `{qid}`: {e}")))
        })
        .collect()
}
