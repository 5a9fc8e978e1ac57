//! Uniform access to the three external services the pipeline needs:
//! text generation, embedding, and reranking.
//!
//! Live backends speak the common chat-completion / embeddings /
//! rerank JSON shapes over HTTP (see [`http`]); the [`stub`] module
//! provides fully deterministic offline replacements so every test and
//! demo runs without network access. Callers never see transport
//! details: a failed call after retries surfaces as a [`BackendError`]
//! and each call site applies its own documented fallback.

pub mod http;
pub mod stub;

use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend request failed after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("backend returned status {status}")]
    Status { status: u16 },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unparseable backend reply: {0}")]
    Parse(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
    #[error("{0}")]
    Failed(String),
}

/// Text-generation service (chat-completion style).
pub trait TextGenerator: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String, BackendError>;
}

/// Dense-embedding service. Returned vectors are L2-normalized; an
/// empty input text maps to the zero vector, which the cosine contract
/// treats as neutral relevance.
pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

/// Cross-encoder reranking service. One relevance number per text,
/// order preserved.
pub trait Reranker: Send + Sync {
    fn rerank(&self, query: &str, texts: &[String]) -> Result<Vec<f64>, BackendError>;
}

/// Connection settings for one live service.
#[derive(Debug, Clone, Deserialize)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub credential: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout() -> f64 {
    30.0
}

fn default_retries() -> u32 {
    2
}

fn default_in_flight() -> usize {
    4
}

impl BackendConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            credential: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !self.timeout_secs.is_finite() || self.timeout_secs <= 0.0 {
            return Err(BackendError::Config(format!(
                "timeout_secs must be positive, got {}",
                self.timeout_secs
            )));
        }
        if self.max_in_flight == 0 {
            return Err(BackendError::Config(
                "max_in_flight must be at least 1".into(),
            ));
        }
        if self.endpoint.is_empty() {
            return Err(BackendError::Config("endpoint must be non-empty".into()));
        }
        Ok(())
    }
}

/// The bundle of services the pipeline draws on.
#[derive(Clone)]
pub struct Backends {
    pub generator: Arc<dyn TextGenerator>,
    pub embedder: Arc<dyn Embedder>,
    pub reranker: Option<Arc<dyn Reranker>>,
}

impl Backends {
    /// Deterministic offline bundle: routed generation stub, token-hash
    /// embeddings, shared-token reranker.
    pub fn offline_stub() -> Self {
        Self {
            generator: Arc::new(stub::PipelineStub),
            embedder: Arc::new(stub::HashEmbedder::default()),
            reranker: Some(Arc::new(stub::OverlapReranker)),
        }
    }

    /// Resolve backends from the environment, optionally overridden by a
    /// TOML file with `[generator]`, `[embedder]`, `[reranker]` tables.
    /// With no endpoints configured anywhere, the offline stubs are used.
    pub fn from_env(config_file: Option<&Path>) -> Result<Self, BackendError> {
        let overrides = match config_file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    BackendError::Config(format!("cannot read {}: {e}", path.display()))
                })?;
                toml::from_str::<FileConfig>(&text)
                    .map_err(|e| BackendError::Config(format!("bad backend config: {e}")))?
            }
            None => FileConfig::default(),
        };

        let generator_cfg = overrides.generator.or_else(|| service_from_env("GEN"));
        let embedder_cfg = overrides.embedder.or_else(|| service_from_env("EMBED"));
        let reranker_cfg = overrides.reranker.or_else(|| service_from_env("RERANK"));

        let stub = Self::offline_stub();
        let generator: Arc<dyn TextGenerator> = match generator_cfg {
            Some(cfg) => {
                cfg.validate()?;
                Arc::new(http::HttpGenerator::new(cfg)?)
            }
            None => stub.generator,
        };
        let embedder: Arc<dyn Embedder> = match embedder_cfg {
            Some(cfg) => {
                cfg.validate()?;
                Arc::new(http::HttpEmbedder::new(cfg)?)
            }
            None => stub.embedder,
        };
        let reranker: Option<Arc<dyn Reranker>> = match reranker_cfg {
            Some(cfg) => {
                cfg.validate()?;
                Some(Arc::new(http::HttpReranker::new(cfg)?))
            }
            None => stub.reranker,
        };
        Ok(Self {
            generator,
            embedder,
            reranker,
        })
    }

    /// True when at least one live endpoint is configured in the environment.
    pub fn env_has_endpoints() -> bool {
        ["GEN", "EMBED", "RERANK"]
            .iter()
            .any(|svc| std::env::var(format!("PAPERTREE_{svc}_ENDPOINT")).is_ok())
    }
}

#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    generator: Option<BackendConfig>,
    embedder: Option<BackendConfig>,
    reranker: Option<BackendConfig>,
}

fn service_from_env(service: &str) -> Option<BackendConfig> {
    let endpoint = std::env::var(format!("PAPERTREE_{service}_ENDPOINT")).ok()?;
    let model = std::env::var(format!("PAPERTREE_{service}_MODEL")).unwrap_or_default();
    let mut cfg = BackendConfig::new(endpoint, model);
    cfg.credential = std::env::var(format!("PAPERTREE_{service}_API_KEY")).ok();
    if let Some(t) = std::env::var(format!("PAPERTREE_{service}_TIMEOUT"))
        .ok()
        .and_then(|v| v.parse::<f64>().ok())
    {
        cfg.timeout_secs = t;
    }
    Some(cfg)
}

/// L2-normalize a vector in place; all-zero input is left untouched.
pub(crate) fn normalize_in_place(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}
