//! Loaded resources and per-query retrieval pipelines.

use anyhow::{anyhow, Context};
use gprf_core::corpus::{load_collection, load_qrels, load_queries};
use gprf_core::dense::{embed_batched, load_embeddings, vprf_refine, HttpEmbedder};
use gprf_core::rewrite::{
    fuse_concat, fuse_dense, generate_pseudo_docs, generate_rewrites, resolve_passages, rrf_fuse,
    ChatRewriter, MockRewriter, OracleRewriter, PromptTemplate, RewriteRequest,
};
use gprf_core::sparse::Analyzer;
use gprf_core::synthetic::replace_with_random;
use gprf_core::{
    Collection, EmbedderClient, Embedding, EmbeddingStore, FeedbackSet, HashingEmbedder,
    InvertedIndex, QrelsTable, Query, RankedList, RewriteCandidate, RewriterClient,
};
use serde::Serialize;
use tracing::info;

use crate::config::{EmbedderKind, ExperimentConfig, Fusion, Method, RetrieverKind, RewriterKind};
use crate::error::CliError;

/// Which resources a command needs loaded.
#[derive(Debug, Clone, Copy, Default)]
pub struct Needs {
    pub sparse: bool,
    pub dense: bool,
    pub rewriter: bool,
    pub qrels: bool,
}

impl Needs {
    pub fn for_experiment(config: &ExperimentConfig) -> Self {
        Needs {
            sparse: config.uses(RetrieverKind::Bm25) || config.method == Method::Rm3,
            dense: config.uses(RetrieverKind::Dense) || config.method == Method::Vprf,
            rewriter: config.method.is_generative(),
            qrels: config.data.qrels.is_some(),
        }
    }
}

pub struct Workspace {
    pub config: ExperimentConfig,
    pub collection: Collection,
    pub queries: Vec<Query>,
    pub qrels: Option<QrelsTable>,
    pub index: Option<InvertedIndex>,
    pub store: Option<EmbeddingStore>,
    pub embedder: Option<Box<dyn EmbedderClient>>,
    pub rewriter: Option<Box<dyn RewriterClient>>,
    pub template: PromptTemplate,
}

/// Per-query result of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryOutcome {
    pub query_id: String,
    #[serde(skip)]
    pub ranking: RankedList,
    /// Feedback documents the method conditioned on, in rank order.
    pub feedback: Vec<String>,
    pub candidates: Vec<RewriteCandidate>,
}

impl Workspace {
    /// Loads data and constructs clients. Runs after config validation.
    pub fn open(config: ExperimentConfig, needs: Needs) -> Result<Self, CliError> {
        let data = &config.data;
        let mut required = vec![&data.collection, &data.queries];
        required.extend(data.qrels.iter().filter(|_| needs.qrels));
        required.extend(data.sparse_index.iter().filter(|_| needs.sparse));
        required.extend(data.embeddings.iter().filter(|_| needs.dense));
        if let Some(missing) = required.iter().find(|p| !p.is_file()) {
            return Err(CliError::Config(format!(
                "input file {} does not exist",
                missing.display()
            )));
        }
        let collection = load_collection(&data.collection, data.format)?;
        let queries = load_queries(&data.queries)?;
        let qrels = match &data.qrels {
            Some(p) if needs.qrels => Some(load_qrels(p)?),
            _ => None,
        };
        info!(
            docs = collection.len(),
            queries = queries.len(),
            "loaded inputs"
        );

        let index = if needs.sparse {
            Some(match &data.sparse_index {
                Some(p) => InvertedIndex::load(p)?,
                None => InvertedIndex::build_with(
                    &collection,
                    Analyzer::with_stopwords(data.stopwords.iter()),
                )?,
            })
        } else {
            None
        };

        let (embedder, store) = if needs.dense {
            let embedder = build_embedder(&config)?;
            let store = match &data.embeddings {
                Some(p) => load_embeddings(p, config.similarity)?,
                None => embed_collection(&*embedder, &collection, &config)?,
            };
            (Some(embedder), Some(store))
        } else {
            (None, None)
        };

        let rewriter: Option<Box<dyn RewriterClient>> = if needs.rewriter {
            let r = &config.rewriter;
            Some(match r.kind {
                RewriterKind::Mock => Box::new(MockRewriter::new(r.seed)),
                RewriterKind::Oracle => {
                    let qrels = qrels.as_ref().ok_or_else(|| {
                        CliError::Config("the oracle rewriter requires data.qrels".into())
                    })?;
                    Box::new(OracleRewriter::from_judgments(
                        &queries,
                        qrels,
                        &collection,
                        r.seed,
                    ))
                }
                RewriterKind::Http => Box::new(ChatRewriter::new(&r.chat)?),
            })
        } else {
            None
        };

        let template = match &config.rewriter.instruction {
            Some(instruction) => PromptTemplate {
                instruction: instruction.clone(),
            },
            None => PromptTemplate::default(),
        };

        Ok(Workspace {
            config,
            collection,
            queries,
            qrels,
            index,
            store,
            embedder,
            rewriter,
            template,
        })
    }

    pub fn qrels(&self) -> anyhow::Result<&QrelsTable> {
        self.qrels
            .as_ref()
            .ok_or_else(|| anyhow!("no qrels configured"))
    }

    fn index(&self) -> anyhow::Result<&InvertedIndex> {
        self.index
            .as_ref()
            .ok_or_else(|| anyhow!("sparse index not loaded"))
    }

    fn store(&self) -> anyhow::Result<&EmbeddingStore> {
        self.store
            .as_ref()
            .ok_or_else(|| anyhow!("embedding store not loaded"))
    }

    fn embedder(&self) -> anyhow::Result<&dyn EmbedderClient> {
        self.embedder
            .as_deref()
            .ok_or_else(|| anyhow!("embedder not configured"))
    }

    fn rewriter(&self) -> anyhow::Result<&dyn RewriterClient> {
        self.rewriter
            .as_deref()
            .ok_or_else(|| anyhow!("rewriter not configured"))
    }

    pub fn embed_text(&self, query_id: &str, text: &str) -> anyhow::Result<Embedding> {
        let mut v = self
            .embedder()?
            .embed(&[text.to_string()])
            .with_context(|| format!("embedding query `{query_id}`"))?;
        v.pop()
            .ok_or_else(|| anyhow!("embedder returned no vector for `{query_id}`"))
    }

    /// Top-`depth` ranking of `query` under the given retriever.
    pub fn retrieve(
        &self,
        kind: RetrieverKind,
        query: &Query,
        depth: usize,
    ) -> anyhow::Result<RankedList> {
        match kind {
            RetrieverKind::Bm25 => {
                let index = self.index()?;
                let model = index.query_model(&query.text);
                Ok(index.search(&query.query_id, &model, depth, self.config.bm25)?)
            }
            RetrieverKind::Dense => {
                let v = self.embed_text(&query.query_id, &query.text)?;
                Ok(self.store()?.search(&query.query_id, &v, depth)?)
            }
        }
    }

    /// First-stage top-k under the feedback retriever, with noise injected
    /// when configured.
    pub fn feedback(&self, kind: RetrieverKind, query: &Query) -> anyhow::Result<FeedbackSet> {
        let first = self.retrieve(kind, query, self.config.k)?;
        self.perturb(FeedbackSet::from_ranking(&first, self.config.k))
    }

    fn perturb(&self, feedback: FeedbackSet) -> anyhow::Result<FeedbackSet> {
        if self.config.feedback_noise == 0.0 {
            return Ok(feedback);
        }
        Ok(replace_with_random(
            &feedback,
            &self.collection,
            self.config.feedback_noise,
            self.config.noise_seed,
        )?)
    }

    /// Generates `m` rewrites conditioned on the feedback passages.
    pub fn rewrites(
        &self,
        query: &Query,
        feedback: &FeedbackSet,
    ) -> anyhow::Result<Vec<RewriteCandidate>> {
        let passages = resolve_passages(
            feedback,
            &self.collection,
            self.config.rewriter.passage_chars,
        )?;
        let request = RewriteRequest {
            query: query.clone(),
            passages,
            m: self.config.m,
            temperature: self.config.temperature,
        };
        Ok(generate_rewrites(
            self.rewriter()?,
            &request,
            &self.template,
            self.config.rewriter.retry,
        )?)
    }

    pub fn prompt_passages(&self, feedback: &FeedbackSet) -> anyhow::Result<Vec<String>> {
        Ok(resolve_passages(
            feedback,
            &self.collection,
            self.config.rewriter.passage_chars,
        )?)
    }

    /// Runs the configured method for one query.
    pub fn run_query(&self, query: &Query) -> anyhow::Result<QueryOutcome> {
        let c = &self.config;
        let mut outcome = QueryOutcome {
            query_id: query.query_id.clone(),
            ranking: RankedList::empty(query.query_id.clone(), ""),
            feedback: Vec::new(),
            candidates: Vec::new(),
        };
        let ranking = match c.method {
            Method::None => self.retrieve(c.final_retriever, query, c.depth)?,
            Method::Rm3 => {
                let fb = self.feedback(c.feedback_retriever, query)?;
                let index = self.index()?;
                let expanded = index.rm3_expand(&index.query_model(&query.text), &fb, c.rm3)?;
                outcome.feedback = doc_ids(&fb);
                index.search(&query.query_id, &expanded, c.depth, c.bm25)?
            }
            Method::Vprf => {
                let fb = self.feedback(c.feedback_retriever, query)?;
                let store = self.store()?;
                let docs =
                    fb.docs
                        .iter()
                        .map(|d| {
                            store.get(&d.doc_id).cloned().ok_or_else(|| {
                                anyhow!("no embedding for feedback doc `{}`", d.doc_id)
                            })
                        })
                        .collect::<anyhow::Result<Vec<_>>>()?;
                let q = self.embed_text(&query.query_id, &query.text)?;
                let refined = vprf_refine(&q, &docs, c.vprf.alpha, c.vprf.beta)?;
                outcome.feedback = doc_ids(&fb);
                store.search(&query.query_id, &refined, c.depth)?
            }
            Method::GrfConcat | Method::Gprf => {
                let candidates = if c.method == Method::Gprf {
                    let fb = self.feedback(c.feedback_retriever, query)?;
                    outcome.feedback = doc_ids(&fb);
                    self.rewrites(query, &fb)?
                } else {
                    generate_pseudo_docs(
                        self.rewriter()?,
                        query,
                        c.rewriter.pseudo_doc_prompt.as_deref(),
                        c.m,
                        c.temperature,
                        c.rewriter.retry,
                    )?
                };
                let ranking = self.fuse(query, &candidates)?;
                outcome.candidates = candidates;
                ranking
            }
        };
        outcome.ranking = ranking.with_tag(c.tag()).quantized();
        Ok(outcome)
    }

    fn fuse(&self, query: &Query, candidates: &[RewriteCandidate]) -> anyhow::Result<RankedList> {
        let c = &self.config;
        match c.fusion {
            Fusion::Concat => {
                self.retrieve(c.final_retriever, &fuse_concat(query, candidates), c.depth)
            }
            Fusion::DenseAggregate => {
                let v = fuse_dense(
                    self.embedder()?,
                    query,
                    candidates,
                    c.vprf.alpha,
                    c.vprf.beta,
                )?;
                Ok(self.store()?.search(&query.query_id, &v, c.depth)?)
            }
            Fusion::Rrf => {
                let mut lists = vec![self.retrieve(c.final_retriever, query, c.depth)?];
                for cand in candidates {
                    let q = Query {
                        query_id: query.query_id.clone(),
                        text: cand.text.clone(),
                    };
                    lists.push(self.retrieve(c.final_retriever, &q, c.depth)?);
                }
                Ok(rrf_fuse(&query.query_id, &lists, c.rrf_k, c.depth)?)
            }
        }
    }
}

fn doc_ids(fb: &FeedbackSet) -> Vec<String> {
    fb.docs.iter().map(|d| d.doc_id.clone()).collect()
}

pub fn build_embedder(config: &ExperimentConfig) -> Result<Box<dyn EmbedderClient>, CliError> {
    let e = &config.embedder;
    Ok(match e.kind {
        EmbedderKind::Hashing => Box::new(HashingEmbedder::new(e.dim)?),
        EmbedderKind::Http => Box::new(HttpEmbedder::new(&e.http, e.model.clone())?),
    })
}

/// Embeds every document with the configured embedder.
pub fn embed_collection(
    embedder: &dyn EmbedderClient,
    collection: &Collection,
    config: &ExperimentConfig,
) -> Result<EmbeddingStore, CliError> {
    let texts: Vec<String> = collection.iter().map(|d| d.text.clone()).collect();
    let vecs = embed_batched(
        embedder,
        &texts,
        config.embedder.batch_size,
        config.embedder.max_in_flight,
    )?;
    let entries = collection
        .iter()
        .map(|d| d.doc_id.clone())
        .zip(vecs)
        .collect();
    Ok(EmbeddingStore::new(entries, config.similarity)?)
}
