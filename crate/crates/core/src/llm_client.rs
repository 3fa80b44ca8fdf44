//! Chat-completions client with per-token logprobs.
//!
//! Requests go to `POST <base_url>/chat/completions` with `logprobs: true`.
//! Transient failures (HTTP 429, 5xx, timeouts, connection errors) are
//! retried with exponential backoff and jitter. Batches keep at most
//! `parallelism` requests in flight and return results in input order.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use rand::Rng;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::prompting::ChatTranscript;

/// Environment variable consulted when an endpoint has no API key.
pub const API_KEY_ENV: &str = "PHISHBENCH_API_KEY";

pub const MAX_RETRIES_LIMIT: u32 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("endpoint unreachable after {attempts} attempt(s): {last_error}")]
    Unreachable { attempts: u32, last_error: String },
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("context overflow: {0}")]
    ContextOverflow(String),
    #[error("request rejected with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
    #[error("transcript has no messages")]
    EmptyTranscript,
}

fn default_timeout() -> f64 {
    120.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_max_output_tokens() -> u32 {
    512
}
fn default_backoff_ms() -> u64 {
    500
}

/// One model behind one chat-completions server.
#[derive(Clone, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub base_url: String,
    #[serde(alias = "model")]
    pub model_name: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    /// Per-request timeout in seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    /// First backoff delay; doubles on each retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

impl fmt::Debug for ModelEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelEndpoint")
            .field("base_url", &self.base_url)
            .field("model_name", &self.model_name)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("timeout", &self.timeout)
            .field("max_retries", &self.max_retries)
            .field("temperature", &self.temperature)
            .field("max_output_tokens", &self.max_output_tokens)
            .finish()
    }
}

impl ModelEndpoint {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key: None,
            timeout: default_timeout(),
            max_retries: default_max_retries(),
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
            backoff_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        let invalid = |m: String| Err(ClientError::InvalidEndpoint(m));
        match reqwest::Url::parse(&self.base_url) {
            Ok(u) if matches!(u.scheme(), "http" | "https") => {}
            Ok(u) => return invalid(format!("unsupported scheme {:?}", u.scheme())),
            Err(e) => return invalid(format!("{:?}: {e}", self.base_url)),
        }
        if self.model_name.trim().is_empty() {
            return invalid("model name is empty".into());
        }
        if self.max_retries > MAX_RETRIES_LIMIT {
            return invalid(format!("max_retries {} exceeds {MAX_RETRIES_LIMIT}", self.max_retries));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return invalid(format!("temperature {} must be >= 0", self.temperature));
        }
        if self.max_output_tokens == 0 {
            return invalid("max_output_tokens must be positive".into());
        }
        if !(self.timeout.is_finite() && self.timeout > 0.0) {
            return invalid(format!("timeout {} must be positive", self.timeout));
        }
        Ok(())
    }

    /// `<model>@<first 8 hex digits of sha256(base_url)>`.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.base_url.trim_end_matches('/').as_bytes());
        format!("{}@{}", self.model_name, &hex(&digest)[..8])
    }

    fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    fn api_key(&self) -> Option<String> {
        self.api_key
            .clone()
            .or_else(|| std::env::var(API_KEY_ENV).ok())
            .filter(|k| !k.is_empty())
    }

    fn request_body(&self, transcript: &ChatTranscript) -> Value {
        json!({
            "model": self.model_name,
            "messages": transcript.messages,
            "temperature": self.temperature,
            "max_tokens": self.max_output_tokens,
            "logprobs": true,
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub token_logprobs: Vec<TokenLogprob>,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
    pub endpoint_fingerprint: String,
    /// False when the server returned no logprobs.
    pub logprobs_available: bool,
    /// False when the token strings do not concatenate to `text`.
    pub tokenization_consistent: bool,
    /// Transient failures retried before this result.
    pub retries: u32,
    #[serde(default)]
    pub cached: bool,
}

impl CompletionResult {
    pub fn token_pairs(&self) -> Vec<(String, f64)> {
        self.token_logprobs
            .iter()
            .map(|t| (t.token.clone(), t.logprob))
            .collect()
    }
}

/// Logprobs a hair above zero come from server-side rounding.
const LOGPROB_SLACK: f64 = 1e-6;

/// Reads the fields this client consumes from a response body.
pub fn parse_response(body: &str, fingerprint: &str) -> Result<CompletionResult, ClientError> {
    let protocol = |m: String| ClientError::ProtocolError(m);
    let root: Value = serde_json::from_str(body).map_err(|e| protocol(format!("body is not JSON: {e}")))?;
    let choice = root
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| protocol("missing field choices[0]".into()))?;
    let message = choice
        .get("message")
        .ok_or_else(|| protocol("missing field choices[0].message".into()))?;
    let text = match message.get("content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) => String::new(),
        Some(_) => return Err(protocol("choices[0].message.content is not a string".into())),
        None => return Err(protocol("missing field choices[0].message.content".into())),
    };

    let content = choice
        .get("logprobs")
        .filter(|l| !l.is_null())
        .and_then(|l| l.get("content"))
        .filter(|c| !c.is_null());
    let mut token_logprobs = Vec::new();
    if let Some(content) = content {
        let entries = content
            .as_array()
            .ok_or_else(|| protocol("choices[0].logprobs.content is not an array".into()))?;
        for (i, entry) in entries.iter().enumerate() {
            let token = entry
                .get("token")
                .and_then(Value::as_str)
                .ok_or_else(|| protocol(format!("missing field choices[0].logprobs.content[{i}].token")))?;
            let logprob = entry
                .get("logprob")
                .and_then(Value::as_f64)
                .ok_or_else(|| protocol(format!("missing field choices[0].logprobs.content[{i}].logprob")))?;
            if !logprob.is_finite() || logprob > LOGPROB_SLACK {
                return Err(protocol(format!("logprob {logprob} at token {i} is not a log-probability")));
            }
            token_logprobs.push(TokenLogprob {
                token: token.to_string(),
                logprob: logprob.min(0.0),
            });
        }
    }
    let logprobs_available = !token_logprobs.is_empty();
    let tokenization_consistent =
        !logprobs_available || token_logprobs.iter().map(|t| t.token.as_str()).collect::<String>() == text;

    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        None | Some("stop") | Some("eos") | Some("end_turn") => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Error,
    };

    Ok(CompletionResult {
        text,
        token_logprobs,
        finish_reason,
        latency_ms: 0,
        endpoint_fingerprint: fingerprint.to_string(),
        logprobs_available,
        tokenization_consistent,
        retries: 0,
        cached: false,
    })
}

fn is_context_overflow(body: &str) -> bool {
    let lower = body.to_ascii_lowercase();
    lower.contains("context_length_exceeded")
        || lower.contains("maximum context length")
        || lower.contains("context length")
        || lower.contains("too many tokens")
}

/// On-disk response cache, one JSON file per request key. Writes go
/// through a temporary file and an atomic rename.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// sha256 over the endpoint fingerprint and the full request body,
    /// which carries the transcript and decoding parameters.
    pub fn key(fingerprint: &str, request: &Value) -> String {
        let mut h = Sha256::new();
        h.update(fingerprint.as_bytes());
        h.update([0u8]);
        h.update(request.to_string().as_bytes());
        hex(&h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub async fn get(&self, key: &str) -> Option<CompletionResult> {
        let bytes = tokio::fs::read(self.path(key)).await.ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub async fn put(&self, key: &str, result: &CompletionResult) -> std::io::Result<()> {
        let tmp = self.dir.join(format!("{key}.{}.tmp", rand::rng().random::<u64>()));
        tokio::fs::write(&tmp, serde_json::to_vec(result)?).await?;
        tokio::fs::rename(&tmp, self.path(key)).await
    }
}

enum Attempt {
    Done(Result<CompletionResult, ClientError>),
    Transient(String),
}

/// Shareable client. Clones share the connection pool, the cache and the
/// optional global in-flight limit.
#[derive(Clone)]
pub struct LlmClient {
    http: reqwest::Client,
    cache: Option<ResponseCache>,
    limiter: Option<Arc<Semaphore>>,
}

impl Default for LlmClient {
    fn default() -> Self {
        Self::new()
    }
}

impl LlmClient {
    pub fn new() -> Self {
        Self {
            http: reqwest::Client::new(),
            cache: None,
            limiter: None,
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Caps in-flight requests across every batch issued through this
    /// client and its clones.
    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.limiter = Some(Arc::new(Semaphore::new(n.max(1))));
        self
    }

    async fn attempt(&self, endpoint: &ModelEndpoint, body: &Value, fingerprint: &str) -> Attempt {
        let mut request = self
            .http
            .post(endpoint.completions_url())
            .timeout(Duration::from_secs_f64(endpoint.timeout))
            .json(body);
        if let Some(key) = endpoint.api_key() {
            request = request.bearer_auth(key);
        }
        let response = match request.send().await {
            Ok(r) => r,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        let status = response.status();
        let text = match response.text().await {
            Ok(t) => t,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        if status.is_success() {
            return Attempt::Done(parse_response(&text, fingerprint));
        }
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Attempt::Transient(format!("HTTP {}", status.as_u16()));
        }
        if is_context_overflow(&text) {
            return Attempt::Done(Err(ClientError::ContextOverflow(text)));
        }
        Attempt::Done(Err(ClientError::Rejected {
            status: status.as_u16(),
            body: text,
        }))
    }

    fn backoff(endpoint: &ModelEndpoint, retry: u32) -> Duration {
        let base = endpoint.backoff_ms.max(1);
        let exp = base.saturating_mul(1u64 << retry.min(16));
        let jitter = rand::rng().random_range(0..base);
        Duration::from_millis(exp + jitter)
    }

    /// One completion, retrying transient failures up to
    /// `endpoint.max_retries` times.
    pub async fn complete(
        &self,
        endpoint: &ModelEndpoint,
        transcript: &ChatTranscript,
    ) -> Result<CompletionResult, ClientError> {
        if transcript.is_empty() {
            return Err(ClientError::EmptyTranscript);
        }
        endpoint.validate()?;
        let fingerprint = endpoint.fingerprint();
        let body = endpoint.request_body(transcript);
        let cache_key = self.cache.as_ref().map(|_| ResponseCache::key(&fingerprint, &body));
        if let (Some(cache), Some(key)) = (&self.cache, &cache_key) {
            if let Some(mut hit) = cache.get(key).await {
                hit.cached = true;
                return Ok(hit);
            }
        }

        let _permit = match &self.limiter {
            Some(l) => Some(l.acquire().await.expect("limiter is never closed")),
            None => None,
        };
        let started = Instant::now();
        let mut retries = 0;
        let result = loop {
            match self.attempt(endpoint, &body, &fingerprint).await {
                Attempt::Done(result) => break result,
                Attempt::Transient(error) => {
                    if retries >= endpoint.max_retries {
                        break Err(ClientError::Unreachable {
                            attempts: retries + 1,
                            last_error: error,
                        });
                    }
                    log::debug!("{fingerprint}: transient failure ({error}), retry {}", retries + 1);
                    tokio::time::sleep(Self::backoff(endpoint, retries)).await;
                    retries += 1;
                }
            }
        };
        let mut result = result?;
        result.retries = retries;
        result.latency_ms = started.elapsed().as_millis() as u64;

        if let (Some(cache), Some(key)) = (&self.cache, &cache_key) {
            if let Err(e) = cache.put(key, &result).await {
                log::warn!("cache write failed: {e}");
            }
        }
        Ok(result)
    }

    /// Completes every transcript with at most `parallelism` requests in
    /// flight. `results[i]` belongs to `transcripts[i]`; failures stay in
    /// place and never abort the batch.
    pub async fn complete_batch(
        &self,
        endpoint: &ModelEndpoint,
        transcripts: &[ChatTranscript],
        parallelism: usize,
    ) -> Vec<Result<CompletionResult, ClientError>> {
        stream::iter(transcripts)
            .map(|t| self.complete(endpoint, t))
            .buffered(parallelism.max(1))
            .collect()
            .await
    }
}
