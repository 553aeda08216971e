//! Feedback-grounded query rewriting: prompt construction, rewriter clients
//! (remote chat completion plus deterministic mocks), pseudo-document
//! generation, and fusion of rewrites with the original query.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::{debug, warn};

use crate::corpus::{Collection, QrelsTable, Query, RankedList, ScoredDoc};
use crate::dense::{fnv1a, vprf_refine, EmbedderClient, Embedding};
use crate::error::{Error, Result};
use crate::http::{HttpSettings, JsonClient};
use crate::sparse::{tokenize, FeedbackSet};

/// Instruction sentence of the rewriting prompt.
pub const REWRITE_INSTRUCTION: &str = "Please rewrite the user's query based on several relevant passages (which may contain noise or errors). The rewritten query should preserve the original meaning while incorporating as much information as possible, so that search engines can more effectively retrieve relevant passages.";

pub const NO_PASSAGES_MARKER: &str = "(no passages retrieved)";

const QUERY_LABEL: &str = "User Query: ";
const PASSAGE_PREFIX: &str = "Passage ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub instruction: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            instruction: REWRITE_INSTRUCTION.to_string(),
        }
    }
}

impl PromptTemplate {
    /// Renders the instruction, one `Passage i:` block per passage in
    /// feedback order, the user query and the trailing answer cue.
    pub fn render(&self, query: &str, passages: &[String]) -> String {
        let mut out = String::with_capacity(
            self.instruction.len()
                + query.len()
                + passages.iter().map(|p| p.len() + 16).sum::<usize>()
                + 64,
        );
        out.push_str(&self.instruction);
        out.push_str("\n\nRelevant Passages:\n\n");
        if passages.is_empty() {
            out.push_str(NO_PASSAGES_MARKER);
            out.push_str("\n\n");
        }
        for (i, p) in passages.iter().enumerate() {
            out.push_str(&format!("{PASSAGE_PREFIX}{}: {}\n\n", i + 1, flatten(p)));
        }
        out.push('\n');
        out.push_str(QUERY_LABEL);
        out.push_str(&flatten(query));
        out.push_str("\n\n\nRewritten Query:");
        out
    }
}

/// Collapses line breaks to single spaces.
pub fn flatten(text: &str) -> String {
    text.replace("\r\n", " ").replace(['\n', '\r'], " ")
}

/// Truncates to at most `budget` characters.
pub fn truncate_passage(text: &str, budget: usize) -> &str {
    match text.char_indices().nth(budget) {
        Some((byte, _)) => &text[..byte],
        None => text,
    }
}

/// Resolves feedback documents to passage texts, truncated to `char_budget`.
pub fn resolve_passages(
    feedback: &FeedbackSet,
    collection: &Collection,
    char_budget: usize,
) -> Result<Vec<String>> {
    feedback
        .docs
        .iter()
        .map(|d| {
            let doc = collection.get(&d.doc_id).ok_or_else(|| {
                Error::Invalid(format!("feedback doc `{}` not in collection", d.doc_id))
            })?;
            let text = truncate_passage(&doc.text, char_budget);
            if text.len() < doc.text.len() {
                debug!(doc_id = %d.doc_id, query_id = %feedback.query_id, budget = char_budget, "truncated feedback passage");
            }
            Ok(text.to_string())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRequest {
    pub query: Query,
    pub passages: Vec<String>,
    pub m: usize,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteCandidate {
    pub text: String,
    pub sample_index: usize,
    /// The generation was blank and the original query was substituted.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

/// Text generation backend for rewrites and pseudo-documents.
pub trait RewriterClient: Send + Sync {
    /// Returns exactly `m` generations for `prompt`, in sample order.
    fn generate(&self, prompt: &str, m: usize, temperature: f64) -> Result<Vec<String>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Extra attempts after the first failure.
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 3,
            backoff_ms: 500,
        }
    }
}

fn call_with_retry(
    client: &dyn RewriterClient,
    prompt: &str,
    m: usize,
    temperature: f64,
    retry: RetryPolicy,
    query_id: &str,
) -> Result<Vec<String>> {
    let mut attempt = 0;
    loop {
        match client.generate(prompt, m, temperature) {
            Ok(texts) if texts.len() == m => return Ok(texts),
            Ok(texts) => {
                return Err(Error::client(format!(
                    "rewriter returned {} generations, expected {m}",
                    texts.len()
                ))
                .for_query(query_id))
            }
            Err(e) if attempt < retry.retries => {
                attempt += 1;
                warn!(query_id, attempt, error = %e, "rewriter call failed, retrying");
                std::thread::sleep(Duration::from_millis(retry.backoff_ms) * attempt);
            }
            Err(e) => return Err(e.for_query(query_id)),
        }
    }
}

fn into_candidates(texts: Vec<String>, query: &Query, what: &str) -> Vec<RewriteCandidate> {
    texts
        .into_iter()
        .enumerate()
        .map(|(sample_index, text)| {
            let trimmed = text.trim();
            if trimmed.is_empty() {
                warn!(query_id = %query.query_id, sample_index, "blank {what}, using the original query");
                RewriteCandidate {
                    text: query.text.clone(),
                    sample_index,
                    fallback: true,
                }
            } else {
                RewriteCandidate {
                    text: trimmed.to_string(),
                    sample_index,
                    fallback: false,
                }
            }
        })
        .collect()
}

/// Samples `m` feedback-grounded rewrites of the request's query.
pub fn generate_rewrites(
    client: &dyn RewriterClient,
    request: &RewriteRequest,
    template: &PromptTemplate,
    retry: RetryPolicy,
) -> Result<Vec<RewriteCandidate>> {
    if request.m == 0 {
        return Err(Error::Invalid("m must be at least 1".into()));
    }
    if !(request.temperature >= 0.0) {
        return Err(Error::Invalid("temperature must be non-negative".into()));
    }
    let prompt = template.render(&request.query.text, &request.passages);
    let texts = call_with_retry(
        client,
        &prompt,
        request.m,
        request.temperature,
        retry,
        &request.query.query_id,
    )?;
    Ok(into_candidates(texts, &request.query, "rewrite"))
}

/// Query-only generation of `m` pseudo-documents from a user-supplied
/// prompt containing a `{question}` placeholder.
pub fn generate_pseudo_docs(
    client: &dyn RewriterClient,
    query: &Query,
    prompt_override: Option<&str>,
    m: usize,
    temperature: f64,
    retry: RetryPolicy,
) -> Result<Vec<RewriteCandidate>> {
    let template = prompt_override.ok_or_else(|| {
        Error::Config("pseudo-document generation requires a prompt template".into())
    })?;
    if !template.contains("{question}") {
        return Err(Error::Config(
            "pseudo-document prompt must contain a `{question}` placeholder".into(),
        ));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let prompt = template.replace("{question}", &flatten(&query.text));
    let texts = call_with_retry(client, &prompt, m, temperature, retry, &query.query_id)?;
    Ok(into_candidates(texts, query, "pseudo-document"))
}

/// `[q; c_1; c_2; ...]` joined by single spaces, candidates in sample order.
pub fn fuse_concat(query: &Query, candidates: &[RewriteCandidate]) -> Query {
    let mut ordered: Vec<&RewriteCandidate> = candidates.iter().collect();
    ordered.sort_by_key(|c| c.sample_index);
    let mut text = flatten(&query.text);
    for c in ordered {
        text.push(' ');
        text.push_str(&flatten(&c.text));
    }
    Query {
        query_id: query.query_id.clone(),
        text,
    }
}

/// Embeds the query and every candidate, then aggregates the candidate
/// vectors onto the query vector with [`vprf_refine`].
pub fn fuse_dense(
    embedder: &dyn EmbedderClient,
    query: &Query,
    candidates: &[RewriteCandidate],
    alpha: f64,
    beta: f64,
) -> Result<Embedding> {
    let mut ordered: Vec<&RewriteCandidate> = candidates.iter().collect();
    ordered.sort_by_key(|c| c.sample_index);
    let texts: Vec<String> = std::iter::once(query.text.clone())
        .chain(ordered.iter().map(|c| c.text.clone()))
        .collect();
    let mut vecs = embedder
        .embed(&texts)
        .map_err(|e| e.for_query(&query.query_id))?;
    if vecs.len() != texts.len() {
        return Err(Error::client(format!(
            "embedder returned {} vectors for {} texts",
            vecs.len(),
            texts.len()
        ))
        .for_query(&query.query_id));
    }
    let q = vecs.remove(0);
    vprf_refine(&q, &vecs, alpha, beta)
}

/// Reciprocal rank fusion: `score(d) = sum over lists of 1 / (k + rank)`.
pub fn rrf_fuse(query_id: &str, lists: &[RankedList], k: f64, depth: usize) -> Result<RankedList> {
    let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
    for list in lists {
        for (i, d) in list.doc_ids().enumerate() {
            *scores.entry(d).or_insert(0.0) += 1.0 / (k + (i + 1) as f64);
        }
    }
    let scored = scores
        .into_iter()
        .map(|(d, s)| ScoredDoc::new(d, s))
        .collect();
    Ok(RankedList::from_scored(query_id, scored, "rrf")?.truncated(depth))
}

/// The query and passages recovered from a rendered rewrite prompt.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedPrompt {
    pub query: Option<String>,
    pub passages: Vec<String>,
}

pub fn parse_prompt(prompt: &str) -> ParsedPrompt {
    let mut parsed = ParsedPrompt::default();
    for line in prompt.lines() {
        if let Some(q) = line.strip_prefix(QUERY_LABEL) {
            parsed.query = Some(q.to_string());
        } else if let Some(rest) = line.strip_prefix(PASSAGE_PREFIX) {
            if let Some((n, text)) = rest.split_once(": ") {
                if n.chars().all(|c| c.is_ascii_digit()) && !n.is_empty() {
                    parsed.passages.push(text.to_string());
                }
            }
        }
    }
    parsed
}

fn sample_rng(seed: u64, prompt: &str, sample: usize) -> ChaCha8Rng {
    let mix = seed
        ^ fnv1a(prompt.as_bytes()).rotate_left(17)
        ^ (sample as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    ChaCha8Rng::seed_from_u64(mix)
}

/// Seeded stand-in for an LLM rewriter. Each rewrite is the query followed
/// by terms drawn from the prompt's passages: the most frequent ones at
/// temperature 0, a frequency-weighted sample otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockRewriter {
    pub seed: u64,
    pub terms_per_rewrite: usize,
}

impl MockRewriter {
    pub fn new(seed: u64) -> Self {
        MockRewriter {
            seed,
            terms_per_rewrite: 5,
        }
    }
}

impl RewriterClient for MockRewriter {
    fn generate(&self, prompt: &str, m: usize, temperature: f64) -> Result<Vec<String>> {
        let parsed = parse_prompt(prompt);
        let source = if parsed.query.is_some() {
            parsed.passages.join(" ")
        } else {
            prompt.to_string()
        };
        let query = parsed.query.unwrap_or_default();
        let query_terms: HashSet<String> = tokenize(&query).into_iter().collect();

        let mut counts: Vec<(String, usize)> = Vec::new();
        let mut slot: HashMap<String, usize> = HashMap::new();
        for t in tokenize(&source) {
            if query_terms.contains(&t) {
                continue;
            }
            match slot.get(&t) {
                Some(&i) => counts[i].1 += 1,
                None => {
                    slot.insert(t.clone(), counts.len());
                    counts.push((t, 1));
                }
            }
        }

        let compose = |terms: Vec<&str>| -> String {
            let mut parts: Vec<&str> = Vec::new();
            if !query.is_empty() {
                parts.push(&query);
            }
            parts.extend(terms);
            parts.join(" ")
        };

        if temperature == 0.0 {
            let mut greedy: Vec<&(String, usize)> = counts.iter().collect();
            greedy.sort_by_key(|t| std::cmp::Reverse(t.1));
            let text = compose(
                greedy
                    .iter()
                    .take(self.terms_per_rewrite)
                    .map(|(t, _)| t.as_str())
                    .collect(),
            );
            return Ok(vec![text; m]);
        }

        Ok((0..m)
            .map(|j| {
                let mut rng = sample_rng(self.seed, prompt, j);
                let mut pool: Vec<(usize, f64)> = counts
                    .iter()
                    .enumerate()
                    .map(|(i, (_, c))| (i, (*c as f64).powf(1.0 / temperature)))
                    .collect();
                let mut picked = Vec::new();
                while picked.len() < self.terms_per_rewrite && !pool.is_empty() {
                    let total: f64 = pool.iter().map(|(_, w)| w).sum();
                    let mut x = rng.random::<f64>() * total;
                    let mut chosen = pool.len() - 1;
                    for (pos, (_, w)) in pool.iter().enumerate() {
                        if x < *w {
                            chosen = pos;
                            break;
                        }
                        x -= w;
                    }
                    let (i, _) = pool.remove(chosen);
                    picked.push(counts[i].0.as_str());
                }
                compose(picked)
            })
            .collect())
    }
}

/// Test rewriter with access to the judgments. When the relevant document
/// for the prompt's query appears among the passages, every sample emits
/// that document's terms; otherwise each sample copies the terms of a
/// seeded-random passage. Query terms are never repeated, so the output
/// reflects only what the feedback contributed.
#[derive(Debug, Clone)]
pub struct OracleRewriter {
    seed: u64,
    targets: HashMap<String, String>,
}

impl OracleRewriter {
    /// Maps each query to its highest-graded document (ties by doc id).
    pub fn from_judgments(
        queries: &[Query],
        qrels: &QrelsTable,
        collection: &Collection,
        seed: u64,
    ) -> Self {
        let mut targets = HashMap::new();
        for q in queries {
            let best = qrels.judgments(&q.query_id).and_then(|j| {
                j.iter()
                    .filter(|(_, &g)| g > 0)
                    .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                    .map(|(d, _)| d)
            });
            if let Some(doc) = best.and_then(|d| collection.get(d)) {
                targets.insert(flatten(&q.text), flatten(&doc.text));
            }
        }
        OracleRewriter { seed, targets }
    }
}

fn novel_terms(text: &str, query: &str) -> String {
    let query_terms: HashSet<String> = tokenize(query).into_iter().collect();
    let mut seen = HashSet::new();
    tokenize(text)
        .into_iter()
        .filter(|t| !query_terms.contains(t) && seen.insert(t.clone()))
        .collect::<Vec<_>>()
        .join(" ")
}

impl RewriterClient for OracleRewriter {
    fn generate(&self, prompt: &str, m: usize, _temperature: f64) -> Result<Vec<String>> {
        let parsed = parse_prompt(prompt);
        let Some(query) = parsed.query else {
            // Query-only prompts carry no grounding; echo the question back.
            return Ok(vec![prompt.trim().to_string(); m]);
        };
        let target = self.targets.get(&query);
        let grounded = target.is_some_and(|t| {
            parsed
                .passages
                .iter()
                .any(|p| !p.trim().is_empty() && t.starts_with(p.as_str()))
        });
        if let (true, Some(t)) = (grounded, target) {
            return Ok(vec![novel_terms(t, &query); m]);
        }
        if parsed.passages.is_empty() {
            return Ok(vec![query; m]);
        }
        Ok((0..m)
            .map(|j| {
                let mut rng = sample_rng(self.seed, prompt, j);
                let p = parsed
                    .passages
                    .choose(&mut rng)
                    .expect("non-empty passages");
                novel_terms(p, &query)
            })
            .collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatSettings {
    #[serde(flatten)]
    pub http: HttpSettings,
    pub model: String,
    pub max_tokens: Option<u32>,
}

/// OpenAI-compatible chat-completion rewriter. Requests `n = m` choices and
/// tops up with further calls if the backend returns fewer.
#[derive(Debug, Clone)]
pub struct ChatRewriter {
    client: JsonClient,
    model: String,
    max_tokens: Option<u32>,
}

impl ChatRewriter {
    pub fn new(settings: &ChatSettings) -> Result<Self> {
        if settings.model.is_empty() {
            return Err(Error::Config("rewriter model name is not set".into()));
        }
        // Retries are handled per request by `generate_rewrites`.
        let http = HttpSettings {
            retries: 0,
            ..settings.http.clone()
        };
        Ok(ChatRewriter {
            client: JsonClient::new(&http)?,
            model: settings.model.clone(),
            max_tokens: settings.max_tokens,
        })
    }

    fn request_body(&self, prompt: &str, n: usize, temperature: f64) -> serde_json::Value {
        let mut body = json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": prompt }],
            "n": n,
            "temperature": temperature,
        });
        if let Some(max) = self.max_tokens {
            body["max_tokens"] = json!(max);
        }
        body
    }
}

pub(crate) fn parse_chat_choices(resp: &serde_json::Value) -> Result<Vec<String>> {
    #[derive(Deserialize)]
    struct Message {
        content: Option<String>,
    }
    #[derive(Deserialize)]
    struct Choice {
        index: Option<usize>,
        message: Message,
    }
    #[derive(Deserialize)]
    struct Body {
        choices: Vec<Choice>,
    }
    let body: Body = serde_json::from_value(resp.clone())
        .map_err(|e| Error::client(format!("unexpected chat completion response: {e}")))?;
    let mut choices: Vec<(usize, String)> = body
        .choices
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c.index.unwrap_or(i), c.message.content.unwrap_or_default()))
        .collect();
    choices.sort_by_key(|(i, _)| *i);
    Ok(choices.into_iter().map(|(_, t)| t).collect())
}

impl RewriterClient for ChatRewriter {
    fn generate(&self, prompt: &str, m: usize, temperature: f64) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(m);
        let mut calls = 0;
        while out.len() < m {
            if calls == m {
                return Err(Error::client(format!(
                    "backend produced {} of {m} generations",
                    out.len()
                )));
            }
            calls += 1;
            let resp = self
                .client
                .post(&self.request_body(prompt, m - out.len(), temperature))?;
            let choices = parse_chat_choices(&resp)?;
            out.extend(choices.into_iter().take(m - out.len()));
        }
        Ok(out)
    }
}
