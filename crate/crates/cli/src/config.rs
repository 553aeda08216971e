//! Experiment configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use gprf_core::http::HttpSettings;
use gprf_core::rewrite::{ChatSettings, RetryPolicy};
use gprf_core::{Bm25Params, CollectionFormat, GrpoConfig, Rm3Params, Similarity};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    Bm25,
    Dense,
}

impl RetrieverKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrieverKind::Bm25 => "bm25",
            RetrieverKind::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Original query only.
    None,
    /// Relevance-model expansion over the feedback documents.
    Rm3,
    /// Vector feedback over the feedback document embeddings.
    Vprf,
    /// Query-only pseudo-documents fused with the query.
    GrfConcat,
    /// Feedback-grounded generative rewrites fused with the query.
    Gprf,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Rm3 => "rm3",
            Method::Vprf => "vprf",
            Method::GrfConcat => "grf_concat",
            Method::Gprf => "gprf",
        }
    }

    pub fn is_generative(self) -> bool {
        matches!(self, Method::GrfConcat | Method::Gprf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Append every generation to the query text.
    Concat,
    /// Aggregate generation embeddings onto the query embedding.
    DenseAggregate,
    /// Retrieve with each generation and merge by reciprocal rank.
    Rrf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub collection: PathBuf,
    pub format: CollectionFormat,
    pub queries: PathBuf,
    pub qrels: Option<PathBuf>,
    /// Prebuilt sparse index; built from the collection when absent.
    pub sparse_index: Option<PathBuf>,
    /// Precomputed document embeddings; computed with the embedder when absent.
    pub embeddings: Option<PathBuf>,
    pub stopwords: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            collection: PathBuf::from("collection.tsv"),
            format: CollectionFormat::Tsv,
            queries: PathBuf::from("queries.tsv"),
            qrels: None,
            sparse_index: None,
            embeddings: None,
            stopwords: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VprfConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for VprfConfig {
    fn default() -> Self {
        VprfConfig {
            alpha: 1.0,
            beta: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    /// Token feature hashing; deterministic and offline.
    Hashing,
    /// OpenAI-compatible embeddings endpoint.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub model: Option<String>,
    pub batch_size: usize,
    pub max_in_flight: usize,
    #[serde(flatten)]
    pub http: HttpSettings,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            kind: EmbedderKind::Hashing,
            dim: 1024,
            model: None,
            batch_size: 64,
            max_in_flight: 4,
            http: HttpSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriterKind {
    /// Seeded offline rewriter drawing terms from the feedback passages.
    Mock,
    /// Offline rewriter that knows the judged-relevant document per query.
    Oracle,
    /// OpenAI-compatible chat-completion endpoint.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewriterConfig {
    pub kind: RewriterKind,
    pub seed: u64,
    /// Per-passage character budget in the prompt.
    pub passage_chars: usize,
    /// Replaces the default rewrite instruction.
    pub instruction: Option<String>,
    /// Template for query-only pseudo-documents; must contain `{question}`.
    pub pseudo_doc_prompt: Option<String>,
    pub retry: RetryPolicy,
    #[serde(flatten)]
    pub chat: ChatSettings,
}

impl Default for RewriterConfig {
    fn default() -> Self {
        RewriterConfig {
            kind: RewriterKind::Mock,
            seed: 0,
            passage_chars: 1000,
            instruction: None,
            pseudo_doc_prompt: None,
            retry: RetryPolicy::default(),
            chat: ChatSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactoryRetriever {
    Bm25,
    Dense,
    /// Seeded uniform choice between BM25 and dense per query.
    Alternate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataFactoryConfig {
    pub retriever: FactoryRetriever,
    pub seed: u64,
    pub top_n: usize,
    pub min_utility: f64,
}

impl Default for DataFactoryConfig {
    fn default() -> Self {
        DataFactoryConfig {
            retriever: FactoryRetriever::Bm25,
            seed: 0,
            top_n: 30_000,
            min_utility: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub ndcg_k: usize,
    pub recall_k: usize,
    /// Buckets for the baseline-stratified improvement table.
    pub buckets: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            ndcg_k: 10,
            recall_k: 100,
            buckets: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run tag; derived from method and retrievers when empty.
    pub name: String,
    pub method: Method,
    pub fusion: Fusion,
    pub feedback_retriever: RetrieverKind,
    pub final_retriever: RetrieverKind,
    /// Feedback depth.
    pub k: usize,
    /// Generations sampled per query.
    pub m: usize,
    pub temperature: f64,
    /// Depth of the final ranking.
    pub depth: usize,
    /// Fraction of feedback documents swapped for random ones.
    pub feedback_noise: f64,
    pub noise_seed: u64,
    pub rrf_k: f64,
    pub jobs: usize,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub bm25: Bm25Params,
    pub rm3: Rm3Params,
    pub vprf: VprfConfig,
    pub similarity: Similarity,
    pub embedder: EmbedderConfig,
    pub rewriter: RewriterConfig,
    pub metrics: MetricsConfig,
    pub datafactory: DataFactoryConfig,
    pub grpo: GrpoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: String::new(),
            method: Method::None,
            fusion: Fusion::Concat,
            feedback_retriever: RetrieverKind::Bm25,
            final_retriever: RetrieverKind::Bm25,
            k: 10,
            m: 10,
            temperature: 0.0,
            depth: 1000,
            feedback_noise: 0.0,
            noise_seed: 0,
            rrf_k: 60.0,
            jobs: 1,
            output_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            bm25: Bm25Params::default(),
            rm3: Rm3Params::default(),
            vprf: VprfConfig::default(),
            similarity: Similarity::Cosine,
            embedder: EmbedderConfig::default(),
            rewriter: RewriterConfig::default(),
            metrics: MetricsConfig::default(),
            datafactory: DataFactoryConfig::default(),
            grpo: GrpoConfig::default(),
        }
    }
}

/// Command-line overrides; any flag given wins over the file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long, value_enum)]
    pub fusion: Option<Fusion>,
    #[arg(long, value_enum)]
    pub feedback_retriever: Option<RetrieverKind>,
    #[arg(long, value_enum)]
    pub final_retriever: Option<RetrieverKind>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub feedback_noise: Option<f64>,
    /// Rewriter seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub min_utility: Option<f64>,
    #[arg(long)]
    pub top_n: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.name {
            self.name = v.clone();
        }
        if let Some(v) = o.method {
            self.method = v;
        }
        if let Some(v) = o.fusion {
            self.fusion = v;
        }
        if let Some(v) = o.feedback_retriever {
            self.feedback_retriever = v;
        }
        if let Some(v) = o.final_retriever {
            self.final_retriever = v;
        }
        if let Some(v) = o.k {
            self.k = v;
        }
        if let Some(v) = o.m {
            self.m = v;
        }
        if let Some(v) = o.temperature {
            self.temperature = v;
        }
        if let Some(v) = o.depth {
            self.depth = v;
        }
        if let Some(v) = o.feedback_noise {
            self.feedback_noise = v;
        }
        if let Some(v) = o.seed {
            self.rewriter.seed = v;
        }
        if let Some(v) = o.jobs {
            self.jobs = v;
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = o.min_utility {
            self.datafactory.min_utility = v;
        }
        if let Some(v) = o.top_n {
            self.datafactory.top_n = v;
        }
    }

    /// The run tag: `name` if set, else `<method>-<feedback>-<final>`.
    pub fn tag(&self) -> String {
        if !self.name.is_empty() {
            return self.name.clone();
        }
        let mut tag = format!(
            "{}-{}-{}",
            self.method.as_str(),
            self.feedback_retriever.as_str(),
            self.final_retriever.as_str()
        );
        if self.method.is_generative() {
            tag.push('-');
            tag.push_str(match self.fusion {
                Fusion::Concat => "concat",
                Fusion::DenseAggregate => "agg",
                Fusion::Rrf => "rrf",
            });
        }
        tag
    }

    /// Checks parameter ranges and method/retriever compatibility.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.k == 0 || self.m == 0 || self.depth == 0 || self.jobs == 0 {
            return bad("k, m, depth and jobs must all be at least 1".into());
        }
        if !(self.temperature >= 0.0) {
            return bad(format!("temperature {} must be >= 0", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.feedback_noise) {
            return bad(format!(
                "feedback_noise {} outside [0, 1]",
                self.feedback_noise
            ));
        }
        if !(0.0..=1.0).contains(&self.rm3.alpha) || self.rm3.n_terms == 0 {
            return bad("rm3.alpha must be in [0, 1] and rm3.n_terms >= 1".into());
        }
        if self.metrics.ndcg_k == 0 || self.metrics.recall_k == 0 || self.metrics.buckets == 0 {
            return bad("metric cutoffs and bucket count must be at least 1".into());
        }
        match self.method {
            Method::Rm3 if self.final_retriever != RetrieverKind::Bm25 => {
                return bad("method rm3 requires final_retriever = bm25".into())
            }
            Method::Vprf if self.final_retriever != RetrieverKind::Dense => {
                return bad("method vprf requires final_retriever = dense".into())
            }
            _ => {}
        }
        if self.method.is_generative()
            && self.fusion == Fusion::DenseAggregate
            && self.final_retriever != RetrieverKind::Dense
        {
            return bad("fusion dense_aggregate requires final_retriever = dense".into());
        }
        if self.method == Method::GrfConcat {
            match &self.rewriter.pseudo_doc_prompt {
                None => return bad("method grf_concat requires rewriter.pseudo_doc_prompt".into()),
                Some(p) if !p.contains("{question}") => {
                    return bad("rewriter.pseudo_doc_prompt must contain `{question}`".into())
                }
                _ => {}
            }
        }
        if self.rewriter.kind == RewriterKind::Oracle && self.data.qrels.is_none() {
            return bad("the oracle rewriter requires data.qrels".into());
        }
        if self.embedder.kind == EmbedderKind::Hashing && self.embedder.dim == 0 {
            return bad("embedder.dim must be at least 1".into());
        }
        if self.rewriter.passage_chars == 0 {
            return bad("rewriter.passage_chars must be at least 1".into());
        }
        self.grpo
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn uses(&self, kind: RetrieverKind) -> bool {
        self.feedback_retriever == kind || self.final_retriever == kind
    }
}
