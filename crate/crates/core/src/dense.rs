//! Dense retrieval: embedding stores, exact top-k similarity search and
//! vector pseudo-relevance feedback.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::warn;

use crate::corpus::{RankedList, ScoredDoc};
use crate::error::{Error, Result};
use crate::http::{HttpSettings, JsonClient};
use crate::sparse::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, c: f64) -> Embedding {
        Embedding(self.0.iter().map(|v| v * c).collect())
    }

    fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Dot,
    #[default]
    Cosine,
}

/// Embeddings for a collection, all of one dimension.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    similarity: Similarity,
    ids: Vec<String>,
    vectors: Vec<Embedding>,
    norms: Vec<f64>,
    by_id: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(entries: Vec<(String, Embedding)>, similarity: Similarity) -> Result<Self> {
        let Some(dim) = entries.first().map(|(_, e)| e.dim()) else {
            return Err(Error::Invalid("embedding store is empty".into()));
        };
        if dim == 0 {
            return Err(Error::Invalid("embeddings must have dimension > 0".into()));
        }
        let mut store = EmbeddingStore {
            dim,
            similarity,
            ids: Vec::with_capacity(entries.len()),
            vectors: Vec::with_capacity(entries.len()),
            norms: Vec::with_capacity(entries.len()),
            by_id: HashMap::with_capacity(entries.len()),
        };
        for (id, v) in entries {
            if v.dim() != dim {
                return Err(Error::Dimension {
                    id,
                    expected: dim,
                    got: v.dim(),
                });
            }
            if !v.is_finite() {
                return Err(Error::Invalid(format!(
                    "embedding `{id}` has non-finite values"
                )));
            }
            let norm = v.norm();
            if similarity == Similarity::Cosine && norm == 0.0 {
                return Err(Error::Invalid(format!(
                    "embedding `{id}` is a zero vector (not allowed with cosine similarity)"
                )));
            }
            if store.by_id.insert(id.clone(), store.ids.len()).is_some() {
                return Err(Error::DuplicateId(id));
            }
            store.ids.push(id);
            store.vectors.push(v);
            store.norms.push(norm);
        }
        Ok(store)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn similarity(&self) -> Similarity {
        self.similarity
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Embedding> {
        self.by_id.get(id).map(|&i| &self.vectors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Embedding)> {
        self.ids.iter().map(String::as_str).zip(&self.vectors)
    }

    /// Exact top-k by scoring every stored vector. Cosine scores are
    /// `dot / (|q| * |d|)`.
    pub fn search(&self, query_id: &str, query: &Embedding, k: usize) -> Result<RankedList> {
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        if query.dim() != self.dim {
            return Err(Error::Dimension {
                id: query_id.to_string(),
                expected: self.dim,
                got: query.dim(),
            });
        }
        if !query.is_finite() {
            return Err(Error::Invalid(format!(
                "query `{query_id}` vector is not finite"
            )));
        }
        let qnorm = query.norm();
        if self.similarity == Similarity::Cosine && qnorm == 0.0 {
            return Err(Error::Invalid(format!(
                "query `{query_id}` is a zero vector under cosine similarity"
            )));
        }
        let scored = self
            .ids
            .iter()
            .zip(&self.vectors)
            .zip(&self.norms)
            .map(|((id, v), &n)| {
                let dot = query.dot(v);
                let score = match self.similarity {
                    Similarity::Dot => dot,
                    Similarity::Cosine => dot / (qnorm * n),
                };
                ScoredDoc::new(id.clone(), score)
            })
            .collect();
        Ok(RankedList::from_scored(query_id, scored, "dense")?.truncated(k))
    }
}

/// Reads JSONL records `{"id": ..., "vector": [...]}`.
pub fn load_embeddings(path: &Path, similarity: Similarity) -> Result<EmbeddingStore> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(
        BufReader::new(file),
        similarity,
        &path.display().to_string(),
    )
}

pub fn parse_embeddings<R: BufRead>(
    reader: R,
    similarity: Similarity,
    name: &str,
) -> Result<EmbeddingStore> {
    #[derive(Deserialize)]
    struct Record {
        id: String,
        vector: Vec<f64>,
    }
    let mut entries = Vec::new();
    let mut dim = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(name, i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record =
            serde_json::from_str(&line).map_err(|e| Error::parse(name, i + 1, e.to_string()))?;
        let expected = *dim.get_or_insert(r.vector.len());
        if r.vector.len() != expected {
            return Err(Error::Dimension {
                id: r.id,
                expected,
                got: r.vector.len(),
            });
        }
        entries.push((r.id, Embedding(r.vector)));
    }
    if entries.is_empty() {
        return Err(Error::Invalid(format!("{name}: no embeddings found")));
    }
    EmbeddingStore::new(entries, similarity)
}

pub fn save_embeddings(path: &Path, store: &EmbeddingStore) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (id, v) in store.iter() {
        writeln!(out, "{}", json!({ "id": id, "vector": v })).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Vector PRF: `q' = alpha * q + beta * sum(d_i)`.
///
/// Also used to aggregate embeddings of rewritten queries. An empty feedback
/// list with non-zero `beta` yields `alpha * q` and logs a warning.
pub fn vprf_refine(
    query: &Embedding,
    feedback: &[Embedding],
    alpha: f64,
    beta: f64,
) -> Result<Embedding> {
    if let Some(bad) = feedback.iter().find(|d| d.dim() != query.dim()) {
        return Err(Error::Dimension {
            id: "feedback".into(),
            expected: query.dim(),
            got: bad.dim(),
        });
    }
    if feedback.is_empty() && beta != 0.0 {
        warn!("vector feedback is empty, returning the scaled query");
    }
    let mut sum = vec![0.0; query.dim()];
    for d in feedback {
        for (s, v) in sum.iter_mut().zip(&d.0) {
            *s += v;
        }
    }
    Ok(Embedding(
        query
            .0
            .iter()
            .zip(&sum)
            .map(|(q, s)| alpha * q + beta * s)
            .collect(),
    ))
}

/// Text encoder backend.
pub trait EmbedderClient: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>>;
}

/// Deterministic test encoder: token counts hashed into `dim` buckets, then
/// L2-normalized. Text without tokens maps to the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be > 0".into()));
        }
        Ok(HashingEmbedder { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_one(&self, text: &str) -> Embedding {
        let mut v = vec![0.0; self.dim];
        for t in tokenize(text) {
            v[(fnv1a(t.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        Embedding(v)
    }
}

impl EmbedderClient for HashingEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Remote encoder speaking the OpenAI embeddings shape:
/// `{"input": [...]}` -> `{"data": [{"embedding": [...]}, ...]}`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    client: JsonClient,
    model: Option<String>,
}

impl HttpEmbedder {
    pub fn new(settings: &HttpSettings, model: Option<String>) -> Result<Self> {
        Ok(HttpEmbedder {
            client: JsonClient::new(settings)?,
            model,
        })
    }
}

impl EmbedderClient for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        let mut body = json!({ "input": texts });
        if let Some(model) = &self.model {
            body["model"] = Value::String(model.clone());
        }
        let resp = self.client.post(&body)?;
        parse_embedding_response(&resp, texts.len())
    }
}

fn parse_embedding_response(resp: &Value, expected: usize) -> Result<Vec<Embedding>> {
    #[derive(Deserialize)]
    struct Item {
        embedding: Vec<f64>,
        index: Option<usize>,
    }
    #[derive(Deserialize)]
    struct Body {
        data: Vec<Item>,
    }
    let body: Body = serde_json::from_value(resp.clone())
        .map_err(|e| Error::client(format!("unexpected embeddings response: {e}")))?;
    if body.data.len() != expected {
        return Err(Error::client(format!(
            "expected {expected} embeddings, got {}",
            body.data.len()
        )));
    }
    let mut items: Vec<(usize, Vec<f64>)> = body
        .data
        .into_iter()
        .enumerate()
        .map(|(i, it)| (it.index.unwrap_or(i), it.embedding))
        .collect();
    items.sort_by_key(|(i, _)| *i);
    Ok(items.into_iter().map(|(_, v)| Embedding(v)).collect())
}

/// Embeds `texts` in batches, keeping at most `max_in_flight` batches
/// outstanding. Output order matches input order.
pub fn embed_batched(
    client: &dyn EmbedderClient,
    texts: &[String],
    batch_size: usize,
    max_in_flight: usize,
) -> Result<Vec<Embedding>> {
    let batches: Vec<&[String]> = texts.chunks(batch_size.max(1)).collect();
    let mut out = Vec::with_capacity(texts.len());
    for wave in batches.chunks(max_in_flight.max(1)) {
        let results: Vec<Result<Vec<Embedding>>> = std::thread::scope(|s| {
            let handles: Vec<_> = wave
                .iter()
                .map(|batch| s.spawn(move || client.embed(batch)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("embedding worker panicked"))
                .collect()
        });
        for (batch, r) in wave.iter().zip(results) {
            let vecs = r?;
            if vecs.len() != batch.len() {
                return Err(Error::client(format!(
                    "embedder returned {} vectors for {} texts",
                    vecs.len(),
                    batch.len()
                )));
            }
            out.extend(vecs);
        }
    }
    Ok(out)
}
