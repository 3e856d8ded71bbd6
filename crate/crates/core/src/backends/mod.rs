//! Text generation backends.
//!
//! The pipeline treats the query generator, response generator, and relevance
//! classifier as one opaque [`Generator`]. Three implementations exist: a remote
//! client for the model server, a scripted fixture table, and a deterministic
//! rule-based generator for the synthetic corpus.

mod remote;
mod rule;
mod scripted;

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use remote::{RemoteBackend, RemoteConfig, RemoteEmbedder};
pub use rule::{
    rule_query, rule_response, ParsedUtterance, RecordView, RuleBackend, RuleGrammar, SlotState,
    NO_MATCH_RESPONSE,
};
pub use scripted::{ScriptEntry, ScriptFile, ScriptedBackend};

use crate::pipeline::prompt::render_relevance_prompt;
use crate::retriever::RelevanceScorer;

pub const DEFAULT_MAX_OUTPUT_TOKENS: usize = 128;
pub const DEFAULT_BEAM_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Query,
    Response,
    Relevance,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Query => "query",
            Task::Response => "response",
            Task::Relevance => "relevance",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub task: Task,
    pub prompt: String,
    pub max_output_tokens: usize,
    pub beam_size: usize,
}

impl GenerationRequest {
    pub fn new(task: Task, prompt: impl Into<String>) -> Self {
        Self {
            task,
            prompt: prompt.into(),
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            beam_size: DEFAULT_BEAM_SIZE,
        }
    }

    pub fn with_decoding(mut self, params: DecodingParams) -> Self {
        self.max_output_tokens = params.max_output_tokens;
        self.beam_size = params.beam_size;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        if self.beam_size == 0 {
            return Err(BackendError::InvalidRequest(
                "beam_size must be at least 1".into(),
            ));
        }
        if self.max_output_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "max_output_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub max_output_tokens: usize,
    pub beam_size: usize,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            beam_size: DEFAULT_BEAM_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    pub backend_id: String,
    pub latency_ms: f64,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("server error {status}: {message}")]
    Server { status: u16, message: String },
    #[error("malformed server reply: {0}")]
    Protocol(String),
    #[error("no scripted {task} output for prompt {prompt:?}")]
    NotScripted { task: Task, prompt: String },
    #[error("{0}")]
    Other(String),
}

impl BackendError {
    /// Timeouts and transport failures; the CLI maps these to exit code 2.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            BackendError::Timeout(_) | BackendError::Transport { .. }
        )
    }
}

pub trait Generator: Send + Sync {
    fn backend_id(&self) -> &str;

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError>;
}

impl<G: Generator + ?Sized> Generator for std::sync::Arc<G> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        (**self).generate(request)
    }
}

/// Maps a `MATCHED` / `MISMATCHED` label to a relevance score.
pub fn parse_relevance_label(text: &str) -> Result<f64, BackendError> {
    match text.trim() {
        "MATCHED" => Ok(1.0),
        "MISMATCHED" => Ok(0.0),
        other => Err(BackendError::Protocol(format!(
            "expected MATCHED or MISMATCHED, got {other:?}"
        ))),
    }
}

/// Scores relevance by issuing `relevance` generation requests to any generator.
pub struct GeneratorRelevance<G> {
    generator: G,
}

impl<G: Generator> GeneratorRelevance<G> {
    pub fn new(generator: G) -> Self {
        Self { generator }
    }
}

impl<G: Generator> RelevanceScorer for GeneratorRelevance<G> {
    fn relevance(&self, query: &str, record: &str) -> Result<f64, BackendError> {
        let request =
            GenerationRequest::new(Task::Relevance, render_relevance_prompt(query, record));
        let response = self.generator.generate(&request)?;
        parse_relevance_label(&response.text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        assert!(GenerationRequest::new(Task::Query, "x").validate().is_ok());
        assert!(GenerationRequest::new(Task::Query, " ").validate().is_err());
        let mut req = GenerationRequest::new(Task::Query, "x");
        req.beam_size = 0;
        assert!(req.validate().is_err());
    }

    #[test]
    fn defaults_follow_decoding_hyperparameters() {
        let req = GenerationRequest::new(Task::Response, "p");
        assert_eq!(req.beam_size, 4);
        assert_eq!(req.max_output_tokens, 128);
    }

    #[test]
    fn relevance_labels() {
        assert_eq!(parse_relevance_label("MATCHED").unwrap(), 1.0);
        assert_eq!(parse_relevance_label(" MISMATCHED\n").unwrap(), 0.0);
        assert!(parse_relevance_label("maybe").is_err());
    }

    #[test]
    fn task_wire_names() {
        assert_eq!(
            serde_json::to_string(&Task::Relevance).unwrap(),
            "\"relevance\""
        );
    }
}
