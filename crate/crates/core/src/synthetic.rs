//! Seeded synthetic test collection and feedback perturbation.
//!
//! Each query names a topic word shared by a cluster of documents. Exactly
//! one document per cluster is judged relevant (grade 3); it mentions the
//! topic word once, while at least one distractor mentions it more often, so
//! first-stage retrieval finds the relevant document but never ranks it
//! first. Every document also carries words that occur nowhere else, which
//! is what a feedback-aware rewriter can exploit.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Collection, Document, QrelsTable, Query, ScoredDoc};
use crate::dense::fnv1a;
use crate::error::{Error, Result};
use crate::sparse::FeedbackSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticParams {
    pub topics: usize,
    pub docs_per_topic: usize,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            topics: 25,
            docs_per_topic: 8,
            seed: 20_251_018,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub collection: Collection,
    pub queries: Vec<Query>,
    pub qrels: QrelsTable,
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

fn fresh_word(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    loop {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).expect("non-empty"));
            w.push_str(VOWELS.choose(rng).expect("non-empty"));
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

pub fn generate(params: SyntheticParams) -> Result<SyntheticCorpus> {
    if params.topics == 0 || params.docs_per_topic < 2 {
        return Err(Error::Invalid(
            "synthetic corpus needs at least one topic and two documents per topic".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut used = HashSet::new();

    struct Draft {
        topic: usize,
        relevant: bool,
        text: String,
    }
    let mut drafts = Vec::with_capacity(params.topics * params.docs_per_topic);
    let mut topic_words = Vec::with_capacity(params.topics);
    for topic in 0..params.topics {
        let topic_word = fresh_word(&mut rng, &mut used);
        let relevant_slot = rng.random_range(0..params.docs_per_topic);
        let strong_slot =
            (relevant_slot + rng.random_range(1..params.docs_per_topic)) % params.docs_per_topic;
        for slot in 0..params.docs_per_topic {
            let topic_tf = if slot == relevant_slot {
                1
            } else if slot == strong_slot {
                rng.random_range(2..=3)
            } else {
                rng.random_range(1..=3)
            };
            let unique = rng.random_range(6..=9);
            let mut words: Vec<String> = (0..unique)
                .map(|_| fresh_word(&mut rng, &mut used))
                .collect();
            words.extend(std::iter::repeat_n(topic_word.clone(), topic_tf));
            words.shuffle(&mut rng);
            drafts.push(Draft {
                topic,
                relevant: slot == relevant_slot,
                text: words.join(" "),
            });
        }
        topic_words.push(topic_word);
    }
    drafts.shuffle(&mut rng);

    let mut docs = Vec::with_capacity(drafts.len());
    let mut qrels = QrelsTable::default();
    for (i, d) in drafts.iter().enumerate() {
        let doc_id = format!("D{i:04}");
        if d.relevant {
            qrels.insert(&format!("Q{:03}", d.topic + 1), &doc_id, 3);
        }
        docs.push(Document {
            doc_id,
            text: d.text.clone(),
        });
    }
    let queries = topic_words
        .iter()
        .enumerate()
        .map(|(t, w)| Query::new(format!("Q{:03}", t + 1), w.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticCorpus {
        collection: Collection::from_documents(docs)?,
        queries,
        qrels,
    })
}

impl SyntheticCorpus {
    /// Writes `collection.tsv`, `queries.tsv` and `qrels.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut coll = String::new();
        for d in self.collection.iter() {
            coll.push_str(&format!("{}\t{}\n", d.doc_id, d.text));
        }
        let mut queries = String::new();
        for q in &self.queries {
            queries.push_str(&format!("{}\t{}\n", q.query_id, q.text));
        }
        let mut qrels = String::new();
        for q in &self.queries {
            if let Some(j) = self.qrels.judgments(&q.query_id) {
                for (d, g) in j {
                    qrels.push_str(&format!("{} 0 {} {}\n", q.query_id, d, g));
                }
            }
        }
        for (name, body) in [
            ("collection.tsv", coll),
            ("queries.tsv", queries),
            ("qrels.txt", qrels),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Replaces `round(rate * |feedback|)` feedback documents, at seeded random
/// positions, with random collection documents not already in the set.
/// Replacements keep the score of the slot they fill.
pub fn replace_with_random(
    feedback: &FeedbackSet,
    collection: &Collection,
    rate: f64,
    seed: u64,
) -> Result<FeedbackSet> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Invalid(format!("noise rate {rate} outside [0, 1]")));
    }
    let n = feedback.docs.len();
    let replace = (rate * n as f64).round() as usize;
    if replace == 0 {
        return Ok(feedback.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(feedback.query_id.as_bytes()));
    let mut positions: Vec<usize> = (0..n).collect();
    positions.shuffle(&mut rng);
    positions.truncate(replace);
    positions.sort_unstable();

    let mut present: HashSet<String> = feedback.docs.iter().map(|d| d.doc_id.clone()).collect();
    let pool: Vec<&Document> = collection.iter().collect();
    if pool.len() < n + replace {
        return Err(Error::Invalid(
            "collection too small to inject feedback noise".into(),
        ));
    }
    let mut docs = feedback.docs.clone();
    for pos in positions {
        let pick = loop {
            let d = pool.choose(&mut rng).expect("non-empty pool");
            if present.insert(d.doc_id.clone()) {
                break d;
            }
        };
        docs[pos] = ScoredDoc::new(pick.doc_id.clone(), docs[pos].score);
    }
    Ok(FeedbackSet {
        query_id: feedback.query_id.clone(),
        docs,
        k: feedback.k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape() {
        let c = generate(SyntheticParams::default()).unwrap();
        assert_eq!(c.collection.len(), 200);
        assert_eq!(c.queries.len(), 25);
        for q in &c.queries {
            let j = c.qrels.judgments(&q.query_id).unwrap();
            assert_eq!(j.len(), 1);
            assert_eq!(*j.values().next().unwrap(), 3);
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate(SyntheticParams::default()).unwrap();
        let b = generate(SyntheticParams::default()).unwrap();
        assert_eq!(a.collection.documents(), b.collection.documents());
        assert_eq!(a.queries, b.queries);
        let c = generate(SyntheticParams {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.collection.documents(), c.collection.documents());
    }

    #[test]
    fn noise_replaces_requested_fraction() {
        let c = generate(SyntheticParams::default()).unwrap();
        let fb = FeedbackSet {
            query_id: "Q001".into(),
            docs: c
                .collection
                .iter()
                .take(10)
                .enumerate()
                .map(|(i, d)| ScoredDoc::new(d.doc_id.clone(), 10.0 - i as f64))
                .collect(),
            k: 10,
        };
        let noisy = replace_with_random(&fb, &c.collection, 0.5, 9).unwrap();
        let changed = fb
            .docs
            .iter()
            .zip(&noisy.docs)
            .filter(|(a, b)| a.doc_id != b.doc_id)
            .count();
        assert_eq!(changed, 5);
        let unique: HashSet<_> = noisy.docs.iter().map(|d| &d.doc_id).collect();
        assert_eq!(unique.len(), 10);
        assert_eq!(
            noisy,
            replace_with_random(&fb, &c.collection, 0.5, 9).unwrap()
        );
        assert_eq!(replace_with_random(&fb, &c.collection, 0.0, 9).unwrap(), fb);
    }
}
