//! OpenAI-compatible chat-completions client (vLLM, SGLang, TGI and friends).
//!
//! Screenshots go out as base64 PNG `image_url` content parts. Per-token
//! logprobs are read from `choices[].logprobs.content[].logprob` when the
//! server provides them.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use tracing::{debug, warn};

use super::{Backend, BackendError, SampleBatch, SampleRequest};
use crate::parsing::CompletionRecord;

pub const DEFAULT_API_KEY_ENV: &str = "ZOOMGROUND_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpBackendConfig {
    /// Base URL such as `http://localhost:8000/v1`, or the full
    /// `/chat/completions` URL.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    /// Explicit token; never serialized.
    #[serde(skip)]
    pub api_key: Option<String>,
    pub timeout_secs: f64,
    /// Upper bound on in-flight HTTP requests across all callers.
    pub max_concurrency: usize,
    /// Retries allowed per request after the first attempt.
    pub retry_budget: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    /// Issue `n` concurrent single-completion requests instead of one
    /// request with `n` choices.
    pub fanout: bool,
    pub max_tokens: u32,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1".into(),
            model: "default".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            api_key: None,
            timeout_secs: 120.0,
            max_concurrency: 16,
            retry_budget: 3,
            backoff_base_ms: 500,
            backoff_max_ms: 8_000,
            fanout: false,
            max_tokens: 128,
        }
    }
}

impl HttpBackendConfig {
    pub fn chat_url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

pub struct ChatCompletionsBackend {
    cfg: HttpBackendConfig,
    api_key: Option<String>,
    client: reqwest::Client,
    permits: Arc<Semaphore>,
}

impl ChatCompletionsBackend {
    pub fn new(cfg: HttpBackendConfig) -> Result<Self, BackendError> {
        if cfg.max_concurrency == 0 {
            return Err(BackendError::Config("max_concurrency must be at least 1".into()));
        }
        if !(cfg.timeout_secs > 0.0 && cfg.timeout_secs.is_finite()) {
            return Err(BackendError::Config("timeout must be positive".into()));
        }
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let api_key = cfg
            .api_key
            .clone()
            .or_else(|| std::env::var(&cfg.api_key_env).ok())
            .filter(|k| !k.is_empty());
        Ok(Self {
            permits: Arc::new(Semaphore::new(cfg.max_concurrency)),
            cfg,
            api_key,
            client,
        })
    }

    pub fn config(&self) -> &HttpBackendConfig {
        &self.cfg
    }

    fn body(&self, req: &SampleRequest, image_b64: &str, n: usize, seed: Option<u64>) -> Value {
        let mut body = json!({
            "model": self.cfg.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{image_b64}")}},
                    {"type": "text", "text": req.prompt},
                ],
            }],
            "temperature": req.temperature,
            "n": n,
            "max_tokens": self.cfg.max_tokens,
            "logprobs": req.want_logprobs,
        });
        if let Some(seed) = seed {
            body["seed"] = json!(seed);
        }
        body
    }

    async fn encode_image(req: &SampleRequest) -> Result<String, BackendError> {
        let image = Arc::clone(&req.image);
        let png = tokio::task::spawn_blocking(move || image.encode_png())
            .await
            .map_err(|e| BackendError::Protocol(format!("encoder task failed: {e}")))?
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(base64::engine::general_purpose::STANDARD.encode(png))
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let exp = self.cfg.backoff_base_ms.saturating_mul(1u64 << attempt.min(20));
        let capped = exp.min(self.cfg.backoff_max_ms) as f64;
        let jitter = rand::rng().random_range(0.5..=1.0);
        Duration::from_millis((capped * jitter) as u64)
    }

    async fn post_with_retry(&self, body: &Value) -> Result<ChatResponse, BackendError> {
        let mut attempt = 0u32;
        loop {
            let result = {
                let _permit = self
                    .permits
                    .acquire()
                    .await
                    .map_err(|_| BackendError::Config("connection pool closed".into()))?;
                self.post_once(body).await
            };
            match result {
                Ok(resp) => return Ok(resp),
                Err(e) if e.is_retriable() && attempt < self.cfg.retry_budget => {
                    let wait = self.backoff(attempt);
                    warn!(error = %e, attempt, wait_ms = wait.as_millis() as u64, "retrying request");
                    tokio::time::sleep(wait).await;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    async fn post_once(&self, body: &Value) -> Result<ChatResponse, BackendError> {
        let mut request = self.client.post(self.cfg.chat_url()).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let resp = request
            .send()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| BackendError::Transport(e.to_string()))?;
        debug!(%status, bytes = text.len(), "chat completion response");
        match status.as_u16() {
            200..=299 => {
                serde_json::from_str(&text).map_err(|e| BackendError::Protocol(format!("malformed response body: {e}")))
            }
            429 | 503 => Err(BackendError::Capacity(format!("HTTP {status}"))),
            500..=599 => Err(BackendError::Transport(format!("HTTP {status}: {}", snippet(&text)))),
            _ => Err(BackendError::Protocol(format!("HTTP {status}: {}", snippet(&text)))),
        }
    }

    async fn request_choices(
        &self,
        req: &SampleRequest,
        image_b64: &str,
        n: usize,
        seed: Option<u64>,
    ) -> Result<Vec<Result<CompletionRecord, BackendError>>, BackendError> {
        let body = self.body(req, image_b64, n, seed);
        let resp = self.post_with_retry(&body).await?;
        Ok(resp.into_records(n))
    }
}

fn snippet(text: &str) -> String {
    text.chars().take(200).collect()
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    index: Option<usize>,
    #[serde(default)]
    message: Option<Message>,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<Value>,
}

#[derive(Debug, Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Deserialize)]
struct TokenLogprob {
    logprob: f64,
}

impl ChatResponse {
    /// One slot per requested completion, ordered by choice index.
    fn into_records(self, n: usize) -> Vec<Result<CompletionRecord, BackendError>> {
        let mut slots: Vec<Option<Result<CompletionRecord, BackendError>>> = (0..n).map(|_| None).collect();
        for (pos, choice) in self.choices.into_iter().enumerate() {
            let idx = choice.index.unwrap_or(pos);
            if idx >= n || slots[idx].is_some() {
                continue;
            }
            slots[idx] = Some(choice.into_record());
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.unwrap_or_else(|| Err(BackendError::Protocol(format!("missing choice {i}")))))
            .collect()
    }
}

impl Choice {
    fn into_record(self) -> Result<CompletionRecord, BackendError> {
        let text = match self.message.and_then(|m| m.content) {
            Some(Value::String(s)) => s,
            // some servers return content parts
            Some(Value::Array(parts)) => parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
            _ => return Err(BackendError::Protocol("choice has no message content".into())),
        };
        let token_logprobs = self
            .logprobs
            .and_then(|l| l.content)
            .map(|toks| toks.into_iter().map(|t| t.logprob.min(0.0)).collect())
            .unwrap_or_default();
        Ok(CompletionRecord { text, token_logprobs })
    }
}

#[async_trait]
impl Backend for ChatCompletionsBackend {
    fn name(&self) -> &str {
        "http"
    }

    async fn sample(&self, req: &SampleRequest) -> Result<SampleBatch, BackendError> {
        let image_b64 = Self::encode_image(req).await?;
        let slots = if self.cfg.fanout && req.n > 1 {
            let calls = (0..req.n).map(|i| {
                let seed = req.seed.map(|s| s.wrapping_add(i as u64));
                self.request_choices(req, &image_b64, 1, seed)
            });
            futures::future::join_all(calls)
                .await
                .into_iter()
                .map(|r| r.and_then(|mut v| v.pop().unwrap_or_else(|| Err(BackendError::Protocol("empty".into())))))
                .collect::<Vec<_>>()
        } else {
            self.request_choices(req, &image_b64, req.n, req.seed).await?
        };

        let mut batch = SampleBatch::default();
        for slot in slots {
            match slot {
                Ok(rec) => batch.completions.push(rec),
                Err(e) => batch.failures.push(e),
            }
        }
        if batch.completions.is_empty() {
            if let Some(e) = batch.failures.pop() {
                return Err(e);
            }
        }
        Ok(batch)
    }

    async fn infer_deterministic(&self, req: &SampleRequest) -> Result<CompletionRecord, BackendError> {
        let image_b64 = Self::encode_image(req).await?;
        let det = SampleRequest {
            temperature: 0.0,
            n: 1,
            ..req.clone()
        };
        self.request_choices(&det, &image_b64, 1, req.seed)
            .await?
            .pop()
            .unwrap_or_else(|| Err(BackendError::Protocol("no choices".into())))
    }
}
