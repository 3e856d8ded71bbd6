//! Per-turn orchestration: query generation, top-n retrieval, and
//! knowledge-grounded response generation.

pub mod context;
mod export;
pub mod prompt;

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, DecodingParams, GenerationRequest, Generator, Task};
use crate::kb::{KnowledgeBase, KnowledgeRecord};
use crate::retriever::{
    build_index, rerank, IndexConfig, RelevanceScorer, RetrievalResult, RetrieverError,
    RetrieverIndex, ScoredRecord,
};

pub use context::{
    serialize_turns, validate_turns, DialogueContext, DialogueTurn, Query, QueryKind, Speaker,
    NULL_TOKEN,
};
pub use export::{
    export_training_pairs, write_training_pairs, ExportOutcome, TrainingKnowledge, TrainingPair,
};
pub use prompt::{
    render_query_prompt, render_response_prompt, PromptBuilder, QUERY_PROMPT, RESPONSE_PROMPT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Query,
    Retrieve,
    Response,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Query => "query",
            Stage::Retrieve => "retrieve",
            Stage::Response => "response",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid dialogue context: {0}")]
    InvalidContext(String),
    #[error("query stage produced an empty query")]
    EmptyQuery,
    #[error("{stage} stage failed: {source}")]
    Backend {
        stage: Stage,
        #[source]
        source: BackendError,
    },
    #[error("retrieve stage failed: {0}")]
    Retrieval(#[from] RetrieverError),
    #[error("oracle knowledge mode needs gold record ids for this turn")]
    MissingGold,
    #[error("gold record {0} is not in the knowledge base")]
    UnknownGold(String),
    #[error("response stage produced an empty response")]
    EmptyResponse,
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::InvalidContext(_) => None,
            PipelineError::EmptyQuery => Some(Stage::Query),
            PipelineError::Backend { stage, .. } => Some(*stage),
            PipelineError::Retrieval(_)
            | PipelineError::MissingGold
            | PipelineError::UnknownGold(_) => Some(Stage::Retrieve),
            PipelineError::EmptyResponse => Some(Stage::Response),
        }
    }

    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            PipelineError::Backend { source, .. } => Some(source),
            PipelineError::Retrieval(e) => e.backend_error(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Generated query drives retrieval.
    #[default]
    Qtod,
    /// The serialized context itself is the retrieval query.
    IdentityQuery,
    /// Gold records replace retrieval.
    OracleKnowledge,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "qtod" => Ok(Mode::Qtod),
            "identity" | "identity_query" => Ok(Mode::IdentityQuery),
            "oracle" | "oracle_knowledge" => Ok(Mode::OracleKnowledge),
            other => Err(format!(
                "unknown mode {other:?} (expected qtod, identity, oracle)"
            )),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Qtod => "qtod",
            Mode::IdentityQuery => "identity",
            Mode::OracleKnowledge => "oracle",
        })
    }
}

pub const DEFAULT_TOP_N: usize = 3;
pub const DEFAULT_MAX_INPUT_TOKENS: usize = 1024;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub top_n: usize,
    pub mode: Mode,
    pub decoding: DecodingParams,
    pub prompts: PromptBuilder,
    pub index: IndexConfig,
    /// Candidates fetched before reranking; at least `top_n`.
    pub rerank_depth: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_n: DEFAULT_TOP_N,
            mode: Mode::Qtod,
            decoding: DecodingParams::default(),
            prompts: PromptBuilder {
                max_input_tokens: Some(DEFAULT_MAX_INPUT_TOKENS),
                ..PromptBuilder::default()
            },
            index: IndexConfig::bm25(),
            rerank_depth: DEFAULT_TOP_N,
        }
    }
}

/// Start offset and duration of one stage, in milliseconds from the start of the turn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSpan {
    pub start_ms: f64,
    pub duration_ms: f64,
}

impl StageSpan {
    pub fn end_ms(&self) -> f64 {
        self.start_ms + self.duration_ms
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub query: StageSpan,
    pub retrieve: StageSpan,
    pub response: StageSpan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub session_id: String,
    pub turn: usize,
    pub mode: Mode,
    pub query: Query,
    pub retrieved: RetrievalResult,
    pub response: String,
    pub timings: StageTimings,
    /// Byte length of the response prompt sent to the generator.
    pub response_prompt_len: usize,
}

/// A live conversation bound to one knowledge base and its index.
#[derive(Debug, Clone)]
pub struct Session {
    id: String,
    history: Vec<DialogueTurn>,
    kb: Arc<KnowledgeBase>,
    index: Arc<RetrieverIndex>,
}

impl Session {
    pub fn new(id: impl Into<String>, kb: Arc<KnowledgeBase>, index: Arc<RetrieverIndex>) -> Self {
        Self {
            id: id.into(),
            history: Vec::new(),
            kb,
            index,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn history(&self) -> &[DialogueTurn] {
        &self.history
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }
}

pub struct Pipeline {
    generator: Arc<dyn Generator>,
    reranker: Option<Arc<dyn RelevanceScorer>>,
    config: PipelineConfig,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline")
            .field("generator", &self.generator.backend_id())
            .field("reranker", &self.reranker.is_some())
            .field("config", &self.config)
            .finish()
    }
}

impl Pipeline {
    pub fn new(generator: Arc<dyn Generator>, config: PipelineConfig) -> Self {
        Self {
            generator,
            reranker: None,
            config,
        }
    }

    pub fn with_reranker(mut self, reranker: Arc<dyn RelevanceScorer>) -> Self {
        self.reranker = Some(reranker);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn generator(&self) -> &Arc<dyn Generator> {
        &self.generator
    }

    pub fn build_index(&self, kb: &KnowledgeBase) -> Result<RetrieverIndex, PipelineError> {
        Ok(build_index(kb, &self.config.index)?)
    }

    pub fn open_session(
        &self,
        id: impl Into<String>,
        kb: Arc<KnowledgeBase>,
    ) -> Result<Session, PipelineError> {
        let index = Arc::new(self.build_index(&kb)?);
        Ok(Session::new(id, kb, index))
    }

    fn request(&self, task: Task, prompt: String) -> GenerationRequest {
        GenerationRequest::new(task, prompt).with_decoding(self.config.decoding)
    }

    pub fn generate_query(&self, context: &DialogueContext) -> Result<Query, PipelineError> {
        let prompt = self.config.prompts.query_prompt(context);
        let reply = self
            .generator
            .generate(&self.request(Task::Query, prompt))
            .map_err(|source| PipelineError::Backend {
                stage: Stage::Query,
                source,
            })?;
        Query::from_generation(reply.text)
    }

    /// Runs one turn on a fixed context. `gold` is consulted only in oracle mode.
    pub fn run_context(
        &self,
        context: &DialogueContext,
        kb: &KnowledgeBase,
        index: &RetrieverIndex,
        mode: Mode,
        top_n: usize,
        gold: Option<&[String]>,
    ) -> Result<TurnResult, PipelineError> {
        if top_n == 0 {
            return Err(RetrieverError::ZeroTopN.into());
        }
        let turn_start = Instant::now();
        let offset = |t: Instant| t.duration_since(turn_start).as_secs_f64() * 1e3;
        let mut timings = StageTimings::default();

        let query_start = Instant::now();
        let query = match mode {
            Mode::IdentityQuery => Query::text(context.serialize())?,
            Mode::Qtod | Mode::OracleKnowledge => self.generate_query(context)?,
        };
        timings.query = StageSpan {
            start_ms: offset(query_start),
            duration_ms: query_start.elapsed().as_secs_f64() * 1e3,
        };

        let retrieve_start = Instant::now();
        let retrieved = match mode {
            Mode::OracleKnowledge => {
                let gold = gold.ok_or(PipelineError::MissingGold)?;
                let mut entries = Vec::with_capacity(gold.len());
                for id in gold {
                    if !kb.contains(id) {
                        return Err(PipelineError::UnknownGold(id.clone()));
                    }
                    entries.push(ScoredRecord {
                        record_id: id.clone(),
                        score: 1.0,
                    });
                }
                RetrievalResult {
                    entries,
                    query_echo: query.display().to_string(),
                }
            }
            Mode::Qtod | Mode::IdentityQuery => match query.as_text() {
                None => RetrievalResult::empty(""),
                Some(_) => self.retrieve(&query, kb, index, top_n)?,
            },
        };
        timings.retrieve = StageSpan {
            start_ms: offset(retrieve_start),
            duration_ms: retrieve_start.elapsed().as_secs_f64() * 1e3,
        };

        let response_start = Instant::now();
        let records: Vec<&KnowledgeRecord> = retrieved
            .entries
            .iter()
            .map(|e| {
                kb.get(&e.record_id)
                    .ok_or_else(|| PipelineError::UnknownGold(e.record_id.clone()))
            })
            .collect::<Result<_, _>>()?;
        let prompt = self.config.prompts.response_prompt(&records, context);
        let response_prompt_len = prompt.len();
        let reply = self
            .generator
            .generate(&self.request(Task::Response, prompt))
            .map_err(|source| PipelineError::Backend {
                stage: Stage::Response,
                source,
            })?;
        let response = reply.text.trim().to_string();
        if response.is_empty() {
            return Err(PipelineError::EmptyResponse);
        }
        timings.response = StageSpan {
            start_ms: offset(response_start),
            duration_ms: response_start.elapsed().as_secs_f64() * 1e3,
        };

        Ok(TurnResult {
            session_id: context.session_id().to_string(),
            turn: context.user_turn_index(),
            mode,
            query,
            retrieved,
            response,
            timings,
            response_prompt_len,
        })
    }

    fn retrieve(
        &self,
        query: &Query,
        kb: &KnowledgeBase,
        index: &RetrieverIndex,
        top_n: usize,
    ) -> Result<RetrievalResult, PipelineError> {
        match &self.reranker {
            None => Ok(index.retrieve(query, top_n)?),
            Some(scorer) => {
                let depth = self.config.rerank_depth.max(top_n);
                let candidates = index.retrieve(query, depth)?;
                let mut reranked = rerank(
                    query,
                    &candidates,
                    kb,
                    scorer.as_ref(),
                    self.config.prompts.style,
                )?;
                reranked.entries.truncate(top_n);
                Ok(reranked)
            }
        }
    }

    /// Runs a live turn and appends the exchange to the session history. On
    /// error the history is left untouched.
    pub fn run_turn(
        &self,
        session: &mut Session,
        user_utterance: &str,
        mode: Mode,
        top_n: usize,
        gold: Option<&[String]>,
    ) -> Result<TurnResult, PipelineError> {
        let mut turns = session.history.clone();
        turns.push(DialogueTurn::user(user_utterance.trim())?);
        let context = DialogueContext::new(session.id.clone(), turns)?;
        let result = self.run_context(&context, &session.kb, &session.index, mode, top_n, gold)?;
        session.history = context.turns().to_vec();
        session
            .history
            .push(DialogueTurn::system(result.response.clone())?);
        Ok(result)
    }
}

/// Writes turn results as JSON lines.
pub fn write_turn_results<W: Write>(mut out: W, results: &[TurnResult]) -> std::io::Result<()> {
    for result in results {
        serde_json::to_writer(&mut out, result)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
