//! Run configuration: command-line flags layered over an optional TOML file.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qtod_core::backends::{
    DecodingParams, Generator, RemoteBackend, RemoteConfig, RemoteEmbedder, RuleBackend,
    ScriptedBackend,
};
use qtod_core::pipeline::{
    Mode, Pipeline, PipelineConfig, DEFAULT_MAX_INPUT_TOKENS, DEFAULT_TOP_N,
};
use qtod_core::retriever::{DenseMetric, IndexConfig};

use crate::Usage;

pub const BACKEND_URL_ENV: &str = "QTOD_BACKEND_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Rule,
    Scripted,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RetrieverKind {
    Bm25,
    Dense,
}

/// Pipeline flags shared by every command that runs the pipeline.
#[derive(Debug, Clone, Default, Args)]
pub struct PipelineArgs {
    /// TOML file with defaults for any of these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Fixture file for the scripted backend.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Model server address; falls back to QTOD_BACKEND_URL.
    #[arg(long)]
    pub backend_url: Option<String>,
    #[arg(long, value_enum)]
    pub retriever: Option<RetrieverKind>,
    /// Embedding server for the dense retriever; defaults to the backend URL.
    #[arg(long)]
    pub embed_url: Option<String>,
    /// qtod, identity or oracle.
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses one per core.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub beam_size: Option<usize>,
    #[arg(long)]
    pub max_output_tokens: Option<usize>,
    #[arg(long)]
    pub max_input_tokens: Option<usize>,
    /// Per-request timeout for the remote backend, in seconds.
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    #[arg(long)]
    pub max_retries: Option<usize>,
}

/// Keys accepted in the `--config` file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    backend: Option<BackendKind>,
    script: Option<PathBuf>,
    backend_url: Option<String>,
    retriever: Option<RetrieverKind>,
    embed_url: Option<String>,
    mode: Option<String>,
    top_n: Option<usize>,
    seed: Option<u64>,
    jobs: Option<usize>,
    beam_size: Option<usize>,
    max_output_tokens: Option<usize>,
    max_input_tokens: Option<usize>,
    timeout_secs: Option<f64>,
    max_retries: Option<usize>,
}

/// Fully resolved settings. Serialized into run metadata and hashed into the run id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub script: Option<PathBuf>,
    pub backend_url: Option<String>,
    pub retriever: RetrieverKind,
    pub embed_url: Option<String>,
    pub mode: Mode,
    pub top_n: usize,
    pub seed: u64,
    pub jobs: usize,
    pub beam_size: usize,
    pub max_output_tokens: usize,
    pub max_input_tokens: usize,
    pub timeout_secs: f64,
    pub max_retries: usize,
}

fn read_file_config(path: &Path) -> Result<FileConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())).into())
}

impl RunConfig {
    pub fn resolve(args: &PipelineArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => read_file_config(path)?,
            None => FileConfig::default(),
        };
        let file_mode = file
            .mode
            .as_deref()
            .map(str::parse::<Mode>)
            .transpose()
            .map_err(Usage)?;
        let decoding = DecodingParams::default();
        let remote = RemoteConfig::new("");
        let config = Self {
            backend: args.backend.or(file.backend).unwrap_or(BackendKind::Rule),
            script: args.script.clone().or(file.script),
            backend_url: args.backend_url.clone().or(file.backend_url).or_else(|| {
                std::env::var(BACKEND_URL_ENV)
                    .ok()
                    .filter(|s| !s.is_empty())
            }),
            retriever: args
                .retriever
                .or(file.retriever)
                .unwrap_or(RetrieverKind::Bm25),
            embed_url: args.embed_url.clone().or(file.embed_url),
            mode: args.mode.or(file_mode).unwrap_or_default(),
            top_n: args.top_n.or(file.top_n).unwrap_or(DEFAULT_TOP_N),
            seed: args.seed.or(file.seed).unwrap_or(0),
            jobs: args.jobs.or(file.jobs).unwrap_or(0),
            beam_size: args
                .beam_size
                .or(file.beam_size)
                .unwrap_or(decoding.beam_size),
            max_output_tokens: args
                .max_output_tokens
                .or(file.max_output_tokens)
                .unwrap_or(decoding.max_output_tokens),
            max_input_tokens: args
                .max_input_tokens
                .or(file.max_input_tokens)
                .unwrap_or(DEFAULT_MAX_INPUT_TOKENS),
            timeout_secs: args
                .timeout_secs
                .or(file.timeout_secs)
                .unwrap_or(remote.timeout.as_secs_f64()),
            max_retries: args
                .max_retries
                .or(file.max_retries)
                .unwrap_or(remote.max_retries),
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        if self.top_n == 0 {
            bail!(Usage("--top-n must be at least 1".into()));
        }
        if self.beam_size == 0 || self.max_output_tokens == 0 {
            bail!(Usage(
                "beam size and output length must be at least 1".into()
            ));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            bail!(Usage("--timeout-secs must be positive".into()));
        }
        match self.backend {
            BackendKind::Scripted if self.script.is_none() => {
                bail!(Usage("the scripted backend needs --script".into()))
            }
            BackendKind::Remote if self.backend_url.is_none() => {
                bail!(Usage(format!(
                    "the remote backend needs --backend-url or {BACKEND_URL_ENV}"
                )))
            }
            _ => {}
        }
        if self.retriever == RetrieverKind::Dense && self.embedding_url().is_none() {
            bail!(Usage(
                "the dense retriever needs --embed-url or --backend-url".into()
            ));
        }
        Ok(())
    }

    fn embedding_url(&self) -> Option<&str> {
        self.embed_url.as_deref().or(self.backend_url.as_deref())
    }

    fn remote(&self, url: &str) -> Result<RemoteBackend> {
        let mut config = RemoteConfig::new(url);
        config.timeout = Duration::from_secs_f64(self.timeout_secs);
        config.max_retries = self.max_retries;
        Ok(RemoteBackend::new(config)?)
    }

    pub fn generator(&self) -> Result<Arc<dyn Generator>> {
        Ok(match self.backend {
            BackendKind::Rule => Arc::new(RuleBackend::default()),
            BackendKind::Scripted => {
                let path = self.script.as_ref().expect("validated");
                Arc::new(
                    ScriptedBackend::from_file(path)
                        .map_err(|e| Usage(format!("{}: {e}", path.display())))?,
                )
            }
            BackendKind::Remote => {
                Arc::new(self.remote(self.backend_url.as_deref().expect("validated"))?)
            }
        })
    }

    pub fn index_config(&self) -> Result<IndexConfig> {
        Ok(match self.retriever {
            RetrieverKind::Bm25 => IndexConfig::bm25(),
            RetrieverKind::Dense => {
                let backend = self.remote(self.embedding_url().expect("validated"))?;
                IndexConfig::dense(
                    Arc::new(RemoteEmbedder::connect(backend)?),
                    DenseMetric::Dot,
                )
            }
        })
    }

    pub fn pipeline(&self) -> Result<Pipeline> {
        let mut config = PipelineConfig {
            top_n: self.top_n,
            mode: self.mode,
            index: self.index_config()?,
            rerank_depth: self.top_n,
            ..PipelineConfig::default()
        };
        config.decoding.beam_size = self.beam_size;
        config.decoding.max_output_tokens = self.max_output_tokens;
        config.prompts.max_input_tokens = Some(self.max_input_tokens);
        Ok(Pipeline::new(self.generator()?, config))
    }

    /// First 12 hex digits of the SHA-256 of the resolved config.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))[..12].to_string()
    }
}

/// `YYYYmmddTHHMMSSZ-<config hash>`.
pub fn run_id(hash: &str) -> String {
    format!("{}-{hash}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ"))
}

/// Creates a fresh `<out>/<run id>` directory; existing runs are never overwritten.
pub fn run_dir(out: &Path, run_id: &str) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for attempt in 0.. {
        let name = if attempt == 0 {
            run_id.to_string()
        } else {
            format!("{run_id}.{attempt}")
        };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}
