//! Top-n knowledge retrieval: BM25 over linearized records, exhaustive dense
//! scoring, and relevance-model reranking.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::BackendError;
use crate::kb::{linearize_with, KnowledgeBase, LinearizeStyle};
use crate::pipeline::Query;

#[derive(Debug, Error)]
pub enum RetrieverError {
    #[error("retrieval called with the null query")]
    NullQuery,
    #[error("top-n must be at least 1")]
    ZeroTopN,
    #[error("dense index requires an embedding provider")]
    MissingProvider,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding failed: {0}")]
    Embedding(#[source] BackendError),
    #[error("relevance scoring failed for record {record_id}: {source}")]
    Relevance {
        record_id: String,
        #[source]
        source: BackendError,
    },
    #[error("unknown record id {0}")]
    UnknownRecord(String),
}

impl RetrieverError {
    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            RetrieverError::Embedding(e) | RetrieverError::Relevance { source: e, .. } => Some(e),
            _ => None,
        }
    }
}

/// Lowercased maximal alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusStats {
    pub num_docs: usize,
    pub avg_doc_len: f64,
    pub doc_freq: HashMap<String, usize>,
}

impl CorpusStats {
    pub fn from_docs<S: AsRef<str>>(docs: &[Vec<S>]) -> Self {
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        let mut total = 0usize;
        for doc in docs {
            total += doc.len();
            let mut seen: Vec<&str> = doc.iter().map(AsRef::as_ref).collect();
            seen.sort_unstable();
            seen.dedup();
            for term in seen {
                *doc_freq.entry(term.to_string()).or_default() += 1;
            }
        }
        let avg_doc_len = if docs.is_empty() {
            0.0
        } else {
            total as f64 / docs.len() as f64
        };
        Self {
            num_docs: docs.len(),
            avg_doc_len,
            doc_freq,
        }
    }

    pub fn idf(&self, term: &str) -> f64 {
        idf(self.num_docs, self.doc_freq.get(term).copied().unwrap_or(0))
    }
}

/// `ln(1 + (N - df + 0.5) / (df + 0.5))`, floored at zero.
pub fn idf(num_docs: usize, doc_freq: usize) -> f64 {
    let n = num_docs as f64;
    let df = doc_freq as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln().max(0.0)
}

fn term_weight(idf: f64, tf: f64, doc_len: f64, avg_doc_len: f64, params: Bm25Params) -> f64 {
    let length_ratio = if avg_doc_len > 0.0 {
        doc_len / avg_doc_len
    } else {
        1.0
    };
    idf * (tf * (params.k1 + 1.0)) / (tf + params.k1 * (1.0 - params.b + params.b * length_ratio))
}

/// Okapi BM25 of one document. Repeated query tokens contribute once per occurrence.
pub fn bm25_score<S: AsRef<str>>(
    query_tokens: &[S],
    doc_tokens: &[S],
    stats: &CorpusStats,
    params: Bm25Params,
) -> f64 {
    let doc_len = doc_tokens.len() as f64;
    let mut score = 0.0;
    for term in query_tokens {
        let term = term.as_ref();
        let tf = doc_tokens.iter().filter(|t| t.as_ref() == term).count();
        if tf == 0 {
            continue;
        }
        score += term_weight(
            stats.idf(term),
            tf as f64,
            doc_len,
            stats.avg_doc_len,
            params,
        );
    }
    score
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenseMetric {
    #[default]
    Dot,
    Cosine,
}

pub fn dense_score(query: &[f32], doc: &[f32], metric: DenseMetric) -> Result<f64, RetrieverError> {
    if query.len() != doc.len() {
        return Err(RetrieverError::DimensionMismatch {
            left: query.len(),
            right: doc.len(),
        });
    }
    let dot: f64 = query
        .iter()
        .zip(doc)
        .map(|(a, b)| *a as f64 * *b as f64)
        .sum();
    Ok(match metric {
        DenseMetric::Dot => dot,
        DenseMetric::Cosine => {
            let norm = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            let denom = norm(query) * norm(doc);
            if denom == 0.0 {
                0.0
            } else {
                dot / denom
            }
        }
    })
}

pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError>;

    fn embed_many(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, BackendError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Bag-of-words vectors from hashed tokens. Deterministic across runs and platforms.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedding {
    dim: usize,
}

impl HashEmbedding {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x100000001b3)
    })
}

impl EmbeddingProvider for HashEmbedding {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        let mut v = vec![0.0f32; self.dim];
        for token in tokenize(text) {
            v[(fnv1a(token.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        Ok(v)
    }
}

/// Scores `(query, linearized record)` pairs in `[0, 1]`, the probability of `MATCHED`.
pub trait RelevanceScorer: Send + Sync {
    fn relevance(&self, query: &str, record: &str) -> Result<f64, BackendError>;
}

impl<F> RelevanceScorer for F
where
    F: Fn(&str, &str) -> Result<f64, BackendError> + Send + Sync,
{
    fn relevance(&self, query: &str, record: &str) -> Result<f64, BackendError> {
        self(query, record)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub record_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub entries: Vec<ScoredRecord>,
    pub query_echo: String,
}

impl RetrievalResult {
    pub fn empty(query_echo: impl Into<String>) -> Self {
        Self {
            entries: Vec::new(),
            query_echo: query_echo.into(),
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.record_id.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Descending score, then ascending record id.
pub fn rank_order(a: &ScoredRecord, b: &ScoredRecord) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.record_id.cmp(&b.record_id))
}

fn top_n(mut entries: Vec<ScoredRecord>, n: usize) -> Vec<ScoredRecord> {
    if entries.len() > n {
        entries.select_nth_unstable_by(n - 1, rank_order);
        entries.truncate(n);
    }
    entries.sort_by(rank_order);
    entries
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    #[default]
    Bm25,
    Dense,
}

#[derive(Clone, Default)]
pub struct IndexConfig {
    pub kind: IndexKind,
    pub bm25: Bm25Params,
    pub metric: DenseMetric,
    pub provider: Option<Arc<dyn EmbeddingProvider>>,
    pub style: LinearizeStyle,
}

impl fmt::Debug for IndexConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IndexConfig")
            .field("kind", &self.kind)
            .field("bm25", &self.bm25)
            .field("metric", &self.metric)
            .field("provider", &self.provider.as_ref().map(|p| p.dimension()))
            .field("style", &self.style)
            .finish()
    }
}

impl IndexConfig {
    pub fn bm25() -> Self {
        Self::default()
    }

    pub fn dense(provider: Arc<dyn EmbeddingProvider>, metric: DenseMetric) -> Self {
        Self {
            kind: IndexKind::Dense,
            metric,
            provider: Some(provider),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    ids: Vec<String>,
    doc_lens: Vec<usize>,
    postings: HashMap<String, Vec<(u32, u32)>>,
    stats: CorpusStats,
    params: Bm25Params,
}

impl Bm25Index {
    fn build(docs: Vec<(String, Vec<String>)>, params: Bm25Params) -> Self {
        let token_lists: Vec<&Vec<String>> = docs.iter().map(|(_, t)| t).collect();
        let stats =
            CorpusStats::from_docs(&token_lists.iter().map(|t| t.to_vec()).collect::<Vec<_>>());
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        for (doc, (_, tokens)) in docs.iter().enumerate() {
            let mut counts: HashMap<&str, u32> = HashMap::new();
            for t in tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
            for (term, tf) in counts {
                postings
                    .entry(term.to_string())
                    .or_default()
                    .push((doc as u32, tf));
            }
        }
        let doc_lens = docs.iter().map(|(_, t)| t.len()).collect();
        let ids = docs.into_iter().map(|(id, _)| id).collect();
        Self {
            ids,
            doc_lens,
            postings,
            stats,
            params,
        }
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    pub fn num_docs(&self) -> usize {
        self.ids.len()
    }

    fn search(&self, query: &str, n: usize) -> Vec<ScoredRecord> {
        let mut scores = vec![0.0f64; self.ids.len()];
        for term in tokenize(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.stats.idf(&term);
            for &(doc, tf) in list {
                let doc = doc as usize;
                scores[doc] += term_weight(
                    idf,
                    tf as f64,
                    self.doc_lens[doc] as f64,
                    self.stats.avg_doc_len,
                    self.params,
                );
            }
        }
        let entries = scores
            .into_iter()
            .enumerate()
            .filter(|(_, s)| *s > 0.0)
            .map(|(doc, score)| ScoredRecord {
                record_id: self.ids[doc].clone(),
                score,
            })
            .collect();
        top_n(entries, n)
    }
}

#[derive(Clone)]
pub struct DenseIndex {
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
    provider: Arc<dyn EmbeddingProvider>,
    metric: DenseMetric,
}

impl fmt::Debug for DenseIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DenseIndex")
            .field("records", &self.ids.len())
            .field("dimension", &self.provider.dimension())
            .field("metric", &self.metric)
            .finish()
    }
}

impl DenseIndex {
    pub fn vectors(&self) -> &[Vec<f32>] {
        &self.vectors
    }

    fn search(&self, query: &str, n: usize) -> Result<Vec<ScoredRecord>, RetrieverError> {
        if self.ids.is_empty() {
            return Ok(Vec::new());
        }
        let q = self
            .provider
            .embed(query)
            .map_err(RetrieverError::Embedding)?;
        let entries = self
            .ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| {
                Ok(ScoredRecord {
                    record_id: id.clone(),
                    score: dense_score(&q, v, self.metric)?,
                })
            })
            .collect::<Result<Vec<_>, RetrieverError>>()?;
        Ok(top_n(entries, n))
    }
}

/// An immutable index over one knowledge base snapshot.
#[derive(Debug, Clone)]
pub enum RetrieverIndex {
    Bm25(Bm25Index),
    Dense(DenseIndex),
}

impl RetrieverIndex {
    pub fn kind(&self) -> IndexKind {
        match self {
            RetrieverIndex::Bm25(_) => IndexKind::Bm25,
            RetrieverIndex::Dense(_) => IndexKind::Dense,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RetrieverIndex::Bm25(i) => i.ids.len(),
            RetrieverIndex::Dense(i) => i.ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn retrieve(&self, query: &Query, n: usize) -> Result<RetrievalResult, RetrieverError> {
        let text = query.as_text().ok_or(RetrieverError::NullQuery)?;
        self.retrieve_text(text, n)
    }

    /// Top-n records for a query string. BM25 omits records scoring zero.
    pub fn retrieve_text(&self, query: &str, n: usize) -> Result<RetrievalResult, RetrieverError> {
        if n == 0 {
            return Err(RetrieverError::ZeroTopN);
        }
        let entries = match self {
            RetrieverIndex::Bm25(index) => index.search(query, n),
            RetrieverIndex::Dense(index) => index.search(query, n)?,
        };
        Ok(RetrievalResult {
            entries,
            query_echo: query.to_string(),
        })
    }
}

pub fn build_index(
    kb: &KnowledgeBase,
    config: &IndexConfig,
) -> Result<RetrieverIndex, RetrieverError> {
    let texts: Vec<(String, String)> = kb
        .records()
        .iter()
        .map(|r| (r.id.clone(), linearize_with(r, config.style)))
        .collect();
    match config.kind {
        IndexKind::Bm25 => {
            let docs = texts
                .into_iter()
                .map(|(id, text)| (id, tokenize(&text)))
                .collect();
            Ok(RetrieverIndex::Bm25(Bm25Index::build(docs, config.bm25)))
        }
        IndexKind::Dense => {
            let provider = config
                .provider
                .clone()
                .ok_or(RetrieverError::MissingProvider)?;
            let refs: Vec<&str> = texts.iter().map(|(_, t)| t.as_str()).collect();
            let vectors = if refs.is_empty() {
                Vec::new()
            } else {
                provider
                    .embed_many(&refs)
                    .map_err(RetrieverError::Embedding)?
            };
            let dim = provider.dimension();
            if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
                return Err(RetrieverError::DimensionMismatch {
                    left: dim,
                    right: v.len(),
                });
            }
            Ok(RetrieverIndex::Dense(DenseIndex {
                ids: texts.into_iter().map(|(id, _)| id).collect(),
                vectors,
                provider,
                metric: config.metric,
            }))
        }
    }
}

/// Re-sorts candidates by relevance to the query. Ties keep their original order.
pub fn rerank(
    query: &Query,
    candidates: &RetrievalResult,
    kb: &KnowledgeBase,
    scorer: &dyn RelevanceScorer,
    style: LinearizeStyle,
) -> Result<RetrievalResult, RetrieverError> {
    let text = query.as_text().ok_or(RetrieverError::NullQuery)?;
    let mut scored = Vec::with_capacity(candidates.entries.len());
    for entry in &candidates.entries {
        let record = kb
            .get(&entry.record_id)
            .ok_or_else(|| RetrieverError::UnknownRecord(entry.record_id.clone()))?;
        let score = scorer
            .relevance(text, &linearize_with(record, style))
            .and_then(|s| {
                if (0.0..=1.0).contains(&s) {
                    Ok(s)
                } else {
                    Err(BackendError::Protocol(format!(
                        "relevance {s} outside [0, 1]"
                    )))
                }
            })
            .map_err(|source| RetrieverError::Relevance {
                record_id: entry.record_id.clone(),
                source,
            })?;
        scored.push(ScoredRecord {
            record_id: entry.record_id.clone(),
            score,
        });
    }
    scored.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    Ok(RetrievalResult {
        entries: scored,
        query_echo: candidates.query_echo.clone(),
    })
}
