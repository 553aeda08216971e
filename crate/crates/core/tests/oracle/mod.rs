//! Brute-force reference implementations for checking the library.
//!
//! Nothing here calls into the scoring code under test. Where a test
//! demands bit-identical floats, the oracle adds terms in the same order as
//! the library (query terms in lexicographic order, starting from zero).

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use rand::seq::IndexedRandom;
use rand::Rng;

pub fn tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Scores every document against every query term and sorts.
pub fn bm25_exhaustive(
    docs: &[(String, String)],
    query: &str,
    k1: f64,
    b: f64,
    k: usize,
) -> Vec<(String, f64)> {
    let doc_tokens: Vec<Vec<String>> = docs.iter().map(|(_, t)| tokens(t)).collect();
    let n = docs.len();
    let total: usize = doc_tokens.iter().map(Vec::len).sum();
    let avg = total as f64 / n as f64;
    let mut qtf: BTreeMap<String, usize> = BTreeMap::new();
    for t in tokens(query) {
        *qtf.entry(t).or_default() += 1;
    }
    let mut scored = Vec::new();
    for (i, (id, _)) in docs.iter().enumerate() {
        let dl = doc_tokens[i].len() as f64;
        let mut score = 0.0;
        let mut matched = false;
        for (term, &w) in &qtf {
            let tf = doc_tokens[i].iter().filter(|t| *t == term).count();
            if tf == 0 {
                continue;
            }
            matched = true;
            let df = doc_tokens.iter().filter(|d| d.contains(term)).count();
            let idf = ((n as f64 - df as f64 + 0.5) / (df as f64 + 0.5) + 1.0).ln();
            let tf = tf as f64;
            score += w as f64 * idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * dl / avg));
        }
        if matched && score != 0.0 {
            scored.push((id.clone(), score));
        }
    }
    sort_desc(&mut scored);
    scored.truncate(k);
    scored
}

pub fn sort_desc(scored: &mut [(String, f64)]) {
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
}

/// Cosine similarity of the query with every vector, sorted.
pub fn cosine_exhaustive(
    vectors: &[(String, Vec<f64>)],
    q: &[f64],
    k: usize,
) -> Vec<(String, f64)> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(q);
    let mut scored: Vec<(String, f64)> = vectors
        .iter()
        .map(|(id, v)| {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            (id.clone(), dot / (qn * norm(v)))
        })
        .collect();
    sort_desc(&mut scored);
    scored.truncate(k);
    scored
}

/// DCG over explicit positions divided by the DCG of the sorted grades.
pub fn ndcg(ranking: &[String], grades: &HashMap<String, u32>, k: usize) -> f64 {
    let g = |grade: u32| (1u64 << grade) as f64 - 1.0;
    let mut dcg = 0.0;
    for (pos, d) in ranking.iter().enumerate() {
        if pos >= k {
            break;
        }
        let grade = grades.get(d).copied().unwrap_or(0);
        dcg += g(grade) / ((pos + 2) as f64).log2();
    }
    let mut ideal: Vec<u32> = grades.values().copied().filter(|&x| x > 0).collect();
    if ideal.is_empty() {
        return 0.0;
    }
    ideal.sort_by(|a, b| b.cmp(a));
    let mut idcg = 0.0;
    for (pos, &grade) in ideal.iter().enumerate().take(k) {
        idcg += g(grade) / ((pos + 2) as f64).log2();
    }
    dcg / idcg
}

/// Independent RM3: ML document models, shifted/normalized document
/// weights, top-n truncation, renormalization, interpolation.
pub fn rm3(
    docs: &[(String, String)],
    original: &BTreeMap<String, f64>,
    feedback: &[(String, f64)],
    alpha: f64,
    n_terms: usize,
) -> BTreeMap<String, f64> {
    let min = feedback.iter().map(|f| f.1).fold(f64::INFINITY, f64::min);
    let total: f64 = feedback.iter().map(|f| f.1 - min).sum();
    let mut fb: BTreeMap<String, f64> = BTreeMap::new();
    for (id, s) in feedback {
        let pd = if total > 0.0 {
            (s - min) / total
        } else {
            1.0 / feedback.len() as f64
        };
        let text = &docs.iter().find(|(d, _)| d == id).unwrap().1;
        let toks = tokens(text);
        for t in &toks {
            *fb.entry(t.clone()).or_default() += pd / toks.len() as f64;
        }
    }
    let mut top: Vec<(String, f64)> = fb.into_iter().filter(|(_, w)| *w > 0.0).collect();
    top.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    top.truncate(n_terms);
    let z: f64 = top.iter().map(|t| t.1).sum();
    let mut out: BTreeMap<String, f64> = original
        .iter()
        .map(|(t, p)| (t.clone(), (1.0 - alpha) * p))
        .collect();
    for (t, w) in top {
        *out.entry(t).or_default() += alpha * w / z;
    }
    out.retain(|_, w| *w != 0.0);
    out
}

pub fn recall(ranking: &[String], grades: &HashMap<String, u32>, k: usize) -> f64 {
    let relevant = grades.values().filter(|&&g| g > 0).count();
    if relevant == 0 {
        return 0.0;
    }
    let hits = ranking
        .iter()
        .take(k)
        .filter(|d| grades.get(*d).is_some_and(|&g| g > 0))
        .count();
    hits as f64 / relevant as f64
}

/// A random small-vocabulary collection: `(doc_id, text)` pairs.
pub fn random_corpus<R: Rng>(rng: &mut R, max_docs: usize, vocab: usize) -> Vec<(String, String)> {
    let words: Vec<String> = (0..vocab).map(|i| format!("w{i}")).collect();
    let n = rng.random_range(1..=max_docs);
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..=12);
            let text: Vec<&str> = (0..len)
                .map(|_| words.choose(rng).unwrap().as_str())
                .collect();
            (format!("d{i:03}"), text.join(" "))
        })
        .collect()
}

pub fn random_query<R: Rng>(rng: &mut R, vocab: usize) -> String {
    let len = rng.random_range(1..=4);
    (0..len)
        .map(|_| format!("w{}", rng.random_range(0..vocab + 2)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Random judgments over `d0..d{pool}` and a random ranking drawn from a
/// slightly larger pool, so some ranked documents are unjudged.
pub fn random_judged_ranking<R: Rng>(
    rng: &mut R,
    pool: usize,
) -> (HashMap<String, u32>, Vec<String>) {
    let mut grades = HashMap::new();
    for i in 0..pool {
        if rng.random_bool(0.5) {
            grades.insert(format!("d{i}"), rng.random_range(0..=3));
        }
    }
    let mut ids: Vec<String> = (0..pool + 5).map(|i| format!("d{i}")).collect();
    use rand::seq::SliceRandom;
    ids.shuffle(rng);
    ids.truncate(rng.random_range(0..=ids.len()));
    (grades, ids)
}
