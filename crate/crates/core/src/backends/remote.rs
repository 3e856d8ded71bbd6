use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::retriever::{EmbeddingProvider, RelevanceScorer};

use super::{
    parse_relevance_label, BackendError, GenerationRequest, GenerationResponse, Generator,
};

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub timeout: Duration,
    /// Extra attempts after a transport failure. Server-reported errors are never retried.
    pub max_retries: usize,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout: Duration::from_secs(60),
            max_retries: 2,
        }
    }
}

/// HTTP client for the model server (`/generate`, `/relevance`, `/embed`).
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
    id: String,
}

#[derive(Deserialize)]
struct GenerateReply {
    text: String,
}

#[derive(Deserialize)]
struct RelevanceReply {
    label: String,
    #[serde(default)]
    score: Option<f64>,
}

#[derive(Deserialize)]
struct EmbedReply {
    vectors: Vec<Vec<f32>>,
    dim: usize,
}

#[derive(Deserialize)]
struct ErrorReply {
    error: String,
}

#[derive(Serialize)]
struct GenerateBody<'a> {
    task: &'a str,
    prompt: &'a str,
    max_output_tokens: usize,
    beam_size: usize,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Other(format!("building HTTP client: {e}")))?;
        let id = format!("remote:{}", config.base_url.trim_end_matches('/'));
        Ok(Self { config, client, id })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post<B: Serialize, R: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<R, BackendError> {
        let url = self.url(path);
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.client.post(&url).json(body).send() {
                Ok(reply) => return decode(reply),
                Err(e) if e.is_timeout() => return Err(BackendError::Timeout(self.config.timeout)),
                Err(e) if attempts > self.config.max_retries => {
                    return Err(BackendError::Transport {
                        attempts,
                        message: e.to_string(),
                    })
                }
                Err(e) => log::warn!("POST {url} failed (attempt {attempts}): {e}; retrying"),
            }
        }
    }

    pub fn relevance_label(
        &self,
        query: &str,
        record: &str,
    ) -> Result<(String, f64), BackendError> {
        let reply: RelevanceReply =
            self.post("relevance", &json!({"query": query, "record": record}))?;
        let score = match reply.score {
            Some(s) if (0.0..=1.0).contains(&s) => s,
            Some(s) => {
                return Err(BackendError::Protocol(format!(
                    "relevance score {s} outside [0, 1]"
                )))
            }
            None => parse_relevance_label(&reply.label)?,
        };
        Ok((reply.label, score))
    }

    pub fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, BackendError> {
        let reply: EmbedReply = self.post("embed", &json!({ "texts": texts }))?;
        if reply.vectors.len() != texts.len() {
            return Err(BackendError::Protocol(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                reply.vectors.len()
            )));
        }
        if let Some(v) = reply.vectors.iter().find(|v| v.len() != reply.dim) {
            return Err(BackendError::Protocol(format!(
                "vector of length {} does not match dim {}",
                v.len(),
                reply.dim
            )));
        }
        Ok(reply.vectors)
    }
}

fn decode<R: DeserializeOwned>(reply: reqwest::blocking::Response) -> Result<R, BackendError> {
    let status = reply.status();
    let bytes = reply.bytes().map_err(|e| BackendError::Transport {
        attempts: 1,
        message: format!("reading body: {e}"),
    })?;
    if !status.is_success() {
        let message = serde_json::from_slice::<ErrorReply>(&bytes)
            .map(|e| e.error)
            .unwrap_or_else(|_| String::from_utf8_lossy(&bytes).into_owned());
        return Err(BackendError::Server {
            status: status.as_u16(),
            message,
        });
    }
    serde_json::from_slice(&bytes).map_err(|e| BackendError::Protocol(e.to_string()))
}

impl Generator for RemoteBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        request.validate()?;
        let start = Instant::now();
        let body = GenerateBody {
            task: request.task.as_str(),
            prompt: &request.prompt,
            max_output_tokens: request.max_output_tokens,
            beam_size: request.beam_size,
        };
        let reply: GenerateReply = self.post("generate", &body)?;
        Ok(GenerationResponse {
            text: reply.text,
            backend_id: self.id.clone(),
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

impl RelevanceScorer for RemoteBackend {
    fn relevance(&self, query: &str, record: &str) -> Result<f64, BackendError> {
        self.relevance_label(query, record).map(|(_, score)| score)
    }
}

/// Embedding provider backed by the server's `/embed` endpoint.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    backend: RemoteBackend,
    dim: usize,
}

impl RemoteEmbedder {
    /// Probes the server once to learn the embedding dimension.
    pub fn connect(backend: RemoteBackend) -> Result<Self, BackendError> {
        let probe = backend.embed_batch(&["dimension probe"])?;
        let dim = probe[0].len();
        if dim == 0 {
            return Err(BackendError::Protocol("zero-dimensional embeddings".into()));
        }
        Ok(Self { backend, dim })
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        Ok(self.embed_many(&[text])?.remove(0))
    }

    fn embed_many(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, BackendError> {
        let vectors = self.backend.embed_batch(texts)?;
        if let Some(v) = vectors.iter().find(|v| v.len() != self.dim) {
            return Err(BackendError::Protocol(format!(
                "expected {}-dim vectors, got {}",
                self.dim,
                v.len()
            )));
        }
        Ok(vectors)
    }
}
