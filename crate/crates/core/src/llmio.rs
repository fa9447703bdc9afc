//! Clients for OpenAI-compatible generation and embedding endpoints, plus the
//! token-probability and factuality scorer endpoints.
//!
//! One [`LlmClient`] is shared by everything in a process. It retries
//! transient failures (timeouts, connection errors, 429, 5xx) with exponential
//! backoff and bounded jitter, and never has more than `max_in_flight` HTTP
//! requests outstanding.

use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::error::LlmError;
use crate::spanid::{tokenize_words, ProbMatrix, Token, NUM_CLASSES};

pub const API_KEY_ENV: &str = "PERSPECTRA_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndpointKind {
    Generation,
    Embedding,
    Factuality,
    TokenProbs,
}

impl EndpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EndpointKind::Generation => "generation",
            EndpointKind::Embedding => "embedding",
            EndpointKind::Factuality => "factuality",
            EndpointKind::TokenProbs => "token-probs",
        }
    }
}

/// How per-token vectors are obtained from an embeddings endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// Each word token is sent as its own input.
    #[default]
    PerToken,
    /// Fallback for whole-text-only endpoints: each token is embedded
    /// together with `context_window` neighbours on either side.
    Windowed,
}

fn default_context_window() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    pub kind: EndpointKind,
    #[serde(default)]
    pub embedding_mode: EmbeddingMode,
    #[serde(default = "default_context_window")]
    pub context_window: usize,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, kind: EndpointKind) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            kind,
            embedding_mode: EmbeddingMode::default(),
            context_window: default_context_window(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub system: String,
    pub user: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: u64,
    pub model: String,
}

impl GenRequest {
    pub const DEFAULT_MAX_TOKENS: u32 = 256;
    pub const DEFAULT_TEMPERATURE: f64 = 0.1;
    pub const DEFAULT_SEED: u64 = 42;

    pub fn new(model: impl Into<String>, system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            user: user.into(),
            max_tokens: Self::DEFAULT_MAX_TOKENS,
            temperature: Self::DEFAULT_TEMPERATURE,
            seed: Self::DEFAULT_SEED,
            model: model.into(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.max_tokens < 1 {
            return Err(LlmError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest("temperature must be non-negative".into()));
        }
        Ok(())
    }

    /// Chat-completions request body.
    pub fn payload(&self) -> Value {
        json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": self.system},
                {"role": "user", "content": self.user},
            ],
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
            "seed": self.seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResult {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbeddings {
    pub tokens: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl TokenEmbeddings {
    pub fn new(tokens: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self, LlmError> {
        if tokens.len() != vectors.len() {
            return Err(LlmError::Decode(format!(
                "{} vectors for {} tokens",
                vectors.len(),
                tokens.len()
            )));
        }
        let dim = vectors.first().map_or(1, Vec::len);
        if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
            return Err(LlmError::Decode("embedding vectors have inconsistent dimensions".into()));
        }
        Ok(Self { tokens, vectors })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactualityScores {
    pub alignscore: f64,
    pub summac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    /// Relative jitter bound; delays vary within `±jitter` of nominal.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based), without jitter.
    pub fn nominal_delay(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.saturating_sub(1));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    /// Nominal delay scaled by `1 + jitter * unit`, `unit` in `[-1, 1]`.
    pub fn jittered_delay(&self, retry: u32, unit: f64) -> Duration {
        let scale = 1.0 + self.jitter.clamp(0.0, 0.2) * unit.clamp(-1.0, 1.0);
        self.nominal_delay(retry).mul_f64(scale)
    }
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub timeout: Duration,
    pub api_key: Option<String>,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            timeout: Duration::from_secs(120),
            api_key: None,
        }
    }
}

impl ClientConfig {
    /// Defaults with the API key taken from `PERSPECTRA_API_KEY`.
    pub fn from_env() -> Self {
        Self {
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            ..Self::default()
        }
    }
}

enum Failure {
    Transient(String),
    Fatal { status: u16, body: String },
}

pub struct LlmClient {
    http: reqwest::Client,
    config: ClientConfig,
    permits: Arc<Semaphore>,
}

impl LlmClient {
    pub fn new(config: ClientConfig) -> Self {
        let http = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .expect("http client");
        let permits = Arc::new(Semaphore::new(config.max_in_flight.max(1)));
        Self {
            http,
            config,
            permits,
        }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    async fn send_once(&self, url: &str, body: &Value) -> Result<String, Failure> {
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        let mut request = self.http.post(url).json(body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .await
            .map_err(|e| Failure::Transient(format!("request to {url} failed: {e}")))?;
        let status = response.status();
        let text = response
            .text()
            .await
            .map_err(|e| Failure::Transient(format!("reading response from {url}: {e}")))?;
        if status.is_success() {
            Ok(text)
        } else if status.as_u16() == 429 || status.is_server_error() {
            Err(Failure::Transient(format!("status {}: {text}", status.as_u16())))
        } else {
            Err(Failure::Fatal {
                status: status.as_u16(),
                body: text,
            })
        }
    }

    /// POST with retries; returns the decoded body and the number of attempts.
    async fn post<T: DeserializeOwned>(&self, url: &str, body: &Value) -> Result<(T, u32), LlmError> {
        let policy = &self.config.retry;
        let max_attempts = policy.max_attempts.max(1);
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.send_once(url, body).await {
                Ok(text) => {
                    let value = serde_json::from_str(&text)
                        .map_err(|e| LlmError::Decode(format!("{e}: {}", truncate(&text, 200))))?;
                    return Ok((value, attempts));
                }
                Err(Failure::Fatal { status, body }) => {
                    return Err(LlmError::Status {
                        status,
                        body,
                        attempts,
                    })
                }
                Err(Failure::Transient(last)) => {
                    if attempts >= max_attempts {
                        return Err(LlmError::Exhausted { attempts, last });
                    }
                    let unit = rand::rng().random_range(-1.0..=1.0);
                    let delay = policy.jittered_delay(attempts, unit);
                    tracing::debug!(url, attempts, ?delay, %last, "retrying");
                    tokio::time::sleep(delay).await;
                }
            }
        }
    }

    pub async fn chat_complete(
        &self,
        request: &GenRequest,
        endpoint: &EndpointConfig,
    ) -> Result<GenResult, LlmError> {
        request.validate()?;
        let started = Instant::now();
        let (response, attempts): (ChatResponse, u32) = self
            .post(&endpoint.url("/v1/chat/completions"), &request.payload())
            .await?;
        let text = response
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content.unwrap_or_default())
            .ok_or_else(|| LlmError::Decode("response has no choices".into()))?;
        Ok(GenResult {
            text,
            usage: response.usage.unwrap_or_default(),
            latency_ms: started.elapsed().as_millis() as u64,
            attempts,
        })
    }

    pub async fn embed_tokens(&self, text: &str, endpoint: &EndpointConfig) -> Result<TokenEmbeddings, LlmError> {
        let tokens: Vec<String> = tokenize_words(text)
            .tokens
            .into_iter()
            .map(|t| t.text)
            .collect();
        if tokens.is_empty() {
            return Err(LlmError::InvalidRequest("no word tokens to embed".into()));
        }
        let inputs = match endpoint.embedding_mode {
            EmbeddingMode::PerToken => tokens.clone(),
            EmbeddingMode::Windowed => context_windows(&tokens, endpoint.context_window),
        };
        let body = json!({"model": endpoint.model, "input": inputs});
        let (mut response, _): (EmbeddingResponse, u32) =
            self.post(&endpoint.url("/v1/embeddings"), &body).await?;
        response.data.sort_by_key(|d| d.index);
        let vectors = response.data.into_iter().map(|d| d.embedding).collect();
        TokenEmbeddings::new(tokens, vectors)
    }

    /// One provider's class distributions over `tokens`.
    pub async fn token_probs(
        &self,
        text: &str,
        tokens: &[Token],
        endpoint: &EndpointConfig,
    ) -> Result<ProbMatrix, LlmError> {
        let body = json!({"text": text, "tokens": tokens});
        let (response, _): (ProbsResponse, u32) = self.post(&endpoint.url("/v1/token-probs"), &body).await?;
        if response.rows.len() != tokens.len() {
            return Err(LlmError::Decode(format!(
                "{} rows for {} tokens",
                response.rows.len(),
                tokens.len()
            )));
        }
        if let Some(row) = response.rows.iter().find(|r| r.len() != NUM_CLASSES) {
            return Err(LlmError::Decode(format!(
                "expected {NUM_CLASSES} class probabilities per token, got {}",
                row.len()
            )));
        }
        ProbMatrix::new(endpoint.model.clone(), response.rows).map_err(|e| LlmError::Decode(e.to_string()))
    }

    pub async fn factuality(
        &self,
        candidate: &str,
        reference: &str,
        endpoint: &EndpointConfig,
    ) -> Result<FactualityScores, LlmError> {
        let body = json!({"candidate": candidate, "reference": reference});
        let (scores, _) = self.post(&endpoint.url("/v1/factuality"), &body).await?;
        Ok(scores)
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// `tokens[i - w ..= i + w]` joined with spaces, for every `i`.
pub fn context_windows(tokens: &[String], window: usize) -> Vec<String> {
    (0..tokens.len())
        .map(|i| {
            let lo = i.saturating_sub(window);
            let hi = (i + window + 1).min(tokens.len());
            tokens[lo..hi].join(" ")
        })
        .collect()
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: usize,
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct ProbsResponse {
    rows: Vec<Vec<f64>>,
}

/// Something that turns a prompt into a completion.
#[async_trait]
pub trait TextGenerator: Send + Sync {
    async fn generate(&self, system: &str, user: &str) -> Result<GenResult, LlmError>;
}

/// Something that maps text to per-token vectors.
#[async_trait]
pub trait Embedder: Send + Sync {
    async fn embed(&self, text: &str) -> Result<TokenEmbeddings, LlmError>;

    /// Identifier recorded in reports for comparability.
    fn model_id(&self) -> String;
}

#[async_trait]
pub trait FactualityScorer: Send + Sync {
    async fn score(&self, candidate: &str, reference: &str) -> Result<FactualityScores, LlmError>;
}

/// Generation settings applied to every request from an [`Endpoint`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenDefaults {
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenDefaults {
    fn default() -> Self {
        Self {
            max_tokens: GenRequest::DEFAULT_MAX_TOKENS,
            temperature: GenRequest::DEFAULT_TEMPERATURE,
            seed: GenRequest::DEFAULT_SEED,
        }
    }
}

/// A configured endpoint bound to the shared client.
#[derive(Clone)]
pub struct Endpoint {
    pub client: Arc<LlmClient>,
    pub config: EndpointConfig,
    pub defaults: GenDefaults,
}

impl Endpoint {
    pub fn new(client: Arc<LlmClient>, config: EndpointConfig) -> Self {
        Self {
            client,
            config,
            defaults: GenDefaults::default(),
        }
    }

    pub fn with_defaults(mut self, defaults: GenDefaults) -> Self {
        self.defaults = defaults;
        self
    }
}

#[async_trait]
impl TextGenerator for Endpoint {
    async fn generate(&self, system: &str, user: &str) -> Result<GenResult, LlmError> {
        let request = GenRequest {
            max_tokens: self.defaults.max_tokens,
            temperature: self.defaults.temperature,
            seed: self.defaults.seed,
            ..GenRequest::new(self.config.model.clone(), system, user)
        };
        self.client.chat_complete(&request, &self.config).await
    }
}

#[async_trait]
impl Embedder for Endpoint {
    async fn embed(&self, text: &str) -> Result<TokenEmbeddings, LlmError> {
        self.client.embed_tokens(text, &self.config).await
    }

    fn model_id(&self) -> String {
        self.config.model.clone()
    }
}

#[async_trait]
impl FactualityScorer for Endpoint {
    async fn score(&self, candidate: &str, reference: &str) -> Result<FactualityScores, LlmError> {
        self.client.factuality(candidate, reference, &self.config).await
    }
}
