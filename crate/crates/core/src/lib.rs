//! Core library for generalized pseudo-relevance feedback experiments.
//!
//! - [`corpus`]: collections, queries, qrels, TREC run files
//! - [`sparse`]: tokenization, inverted index, BM25, RM3
//! - [`dense`]: embedding stores, exact similarity search, vector PRF
//! - [`rewrite`]: rewrite prompts, rewriter clients, fusion strategies
//! - [`metrics`]: NDCG, recall, utility, t-test, bucket analysis
//! - [`trainer`]: rejection sampling, SFT export, GRPO reward/advantage/loss

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod dense;
pub mod error;
pub mod http;
pub mod metrics;
pub mod rewrite;
pub mod sparse;
pub mod synthetic;
pub mod trainer;

pub use corpus::{
    Collection, CollectionFormat, Document, QrelsTable, Query, RankedList, ScoredDoc,
};
pub use dense::{EmbedderClient, Embedding, EmbeddingStore, HashingEmbedder, Similarity};
pub use error::{Error, Result};
pub use metrics::MetricReport;
pub use rewrite::{RewriteCandidate, RewriterClient};
pub use sparse::{Bm25Params, FeedbackSet, InvertedIndex, QueryTermModel, Rm3Params};
pub use trainer::{GrpoConfig, RolloutGroup, SftRecord};
