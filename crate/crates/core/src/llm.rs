//! Chat-completion client.
//!
//! [`LlmClient`] enforces the input-token budget, retries transient failures,
//! and serves repeated requests from a content-addressed [`ResponseCache`].
//! The actual exchange is delegated to a [`ChatBackend`]: either
//! [`HttpChatBackend`] (any OpenAI-compatible endpoint) or [`ScriptedBackend`]
//! (canned replies, no network).

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::count_tokens;

mod cache;
mod http_backend;
mod scripted;

pub use cache::{RequestLog, ResponseCache};
pub use http_backend::HttpChatBackend;
pub use scripted::{ConsumptionMode, Matcher, ScriptRule, ScriptedBackend};

pub const DEFAULT_API_KEY_ENV: &str = "FINDOC_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("prompt has {tokens} tokens, over the {limit}-token input budget")]
    ContextOverflow { tokens: usize, limit: usize },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("could not decode provider response: {0}")]
    Decode(String),
    #[error("no scripted response matches prompt: {0}")]
    Unscripted(String),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("cache error: {0}")]
    Cache(String),
}

impl LlmError {
    pub fn is_transient(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Flattens messages into one string; scripted matchers look at this.
pub fn render_prompt(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for m in messages {
        out.push_str(m.role.as_str());
        out.push_str(": ");
        out.push_str(&m.content);
        out.push('\n');
    }
    out
}

/// Approximate token count of a message list (whitespace runs).
pub fn prompt_tokens(messages: &[ChatMessage]) -> usize {
    messages.iter().map(|m| count_tokens(&m.content)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: usize,
    pub max_input_tokens: usize,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    /// When set, `max_output_tokens` is reserved out of the input budget
    /// because the provider bills hidden reasoning against the context.
    pub reasoning_counts_against_context: bool,
    pub max_in_flight: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            temperature: 0.0,
            max_output_tokens: 2048,
            max_input_tokens: 128_000,
            timeout_secs: 120,
            retry: RetryPolicy::default(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            reasoning_counts_against_context: false,
            max_in_flight: 4,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_input_tokens == 0 {
            return Err("max_input_tokens must be positive".into());
        }
        if !(self.temperature >= 0.0) {
            return Err("temperature must be non-negative".into());
        }
        if self.model.trim().is_empty() {
            return Err("model must be set".into());
        }
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be positive".into());
        }
        Ok(())
    }

    /// Tokens available to the prompt itself.
    pub fn input_budget(&self) -> usize {
        if self.reasoning_counts_against_context {
            self.max_input_tokens.saturating_sub(self.max_output_tokens)
        } else {
            self.max_input_tokens
        }
    }
}

/// Stable content hash of a request. Sensitive to message order and to every
/// character of every message.
pub fn cache_key(model: &str, messages: &[ChatMessage], temperature: f64) -> String {
    let canonical = serde_json::json!({
        "model": model,
        "temperature": temperature,
        "messages": messages,
    });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

/// The raw exchange with a provider.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, config: &ProviderConfig, messages: &[ChatMessage]) -> Result<String, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub cached: bool,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub requests: usize,
    pub backend_calls: usize,
    pub cache_hits: usize,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

struct Semaphore {
    permits: Mutex<usize>,
    cond: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n),
            cond: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cond.wait(p).unwrap();
        }
        *p -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cond.notify_one();
    }
}

pub struct LlmClient {
    config: ProviderConfig,
    backend: Arc<dyn ChatBackend>,
    cache: Option<Arc<ResponseCache>>,
    log: Option<Arc<RequestLog>>,
    in_flight: Semaphore,
    backend_calls: AtomicUsize,
    usage: Mutex<Usage>,
}

impl LlmClient {
    pub fn new(config: ProviderConfig, backend: Arc<dyn ChatBackend>) -> Self {
        let permits = config.max_in_flight.max(1);
        Self {
            config,
            backend,
            cache: None,
            log: None,
            in_flight: Semaphore::new(permits),
            backend_calls: AtomicUsize::new(0),
            usage: Mutex::new(Usage::default()),
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_log(mut self, log: Arc<RequestLog>) -> Self {
        self.log = Some(log);
        self
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    /// Number of requests that reached the backend (cache misses).
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn usage(&self) -> Usage {
        *self.usage.lock().unwrap()
    }

    pub fn complete(&self, messages: &[ChatMessage]) -> Result<Completion, LlmError> {
        for m in messages {
            if m.role != Role::Assistant && m.content.trim().is_empty() {
                return Err(LlmError::InvalidMessage(format!("empty {} message", m.role.as_str())));
            }
        }
        let tokens = prompt_tokens(messages);
        let limit = self.config.input_budget();
        if tokens > limit {
            return Err(LlmError::ContextOverflow { tokens, limit });
        }
        let key = cache_key(&self.config.model, messages, self.config.temperature);
        if let Some(text) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            let completion = Completion {
                completion_tokens: count_tokens(&text),
                text,
                cached: true,
                prompt_tokens: tokens,
            };
            self.record(&key, messages, &completion);
            return Ok(completion);
        }

        let text = {
            let _permit = self.in_flight.acquire();
            self.call_with_retry(messages)?
        };
        if let Some(cache) = &self.cache {
            cache.put(&key, &self.config.model, &text)?;
        }
        let completion = Completion {
            completion_tokens: count_tokens(&text),
            text,
            cached: false,
            prompt_tokens: tokens,
        };
        self.record(&key, messages, &completion);
        Ok(completion)
    }

    fn call_with_retry(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        let attempts = self.config.retry.max_attempts.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 && self.config.retry.backoff_ms > 0 {
                let factor = 1u64 << (attempt - 1).min(6);
                std::thread::sleep(Duration::from_millis(self.config.retry.backoff_ms * factor));
            }
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.complete(&self.config, messages) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_transient() => {
                    log::warn!("transient provider failure (attempt {}): {e}", attempt + 1);
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn record(&self, key: &str, messages: &[ChatMessage], c: &Completion) {
        {
            let mut u = self.usage.lock().unwrap();
            u.requests += 1;
            u.prompt_tokens += c.prompt_tokens;
            u.completion_tokens += c.completion_tokens;
            if c.cached {
                u.cache_hits += 1;
            } else {
                u.backend_calls += 1;
            }
        }
        if let Some(log) = &self.log {
            log.append(key, &self.config.model, messages, c);
        }
    }
}
