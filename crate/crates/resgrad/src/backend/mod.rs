//! Chat-completion backends.
//!
//! Everything that talks to a language model goes through the [`Backend`]
//! trait: one system + user exchange in, one completion plus token usage out.
//! Implementations: [`ScriptTable`] (deterministic, for hermetic runs and
//! tests), [`HttpBackend`] (OpenAI-compatible wire protocol), and
//! [`RecordingBackend`] (pass-through wrapper that captures traffic).

pub mod http;
pub mod scripted;

pub use http::{HttpBackend, HttpConfig, API_KEY_ENV};
pub use scripted::{ScriptResponse, ScriptRule, ScriptTable};

use std::ops::{Add, AddAssign};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// One chat call: a system and a user message plus decoding settings.
///
/// `model` may be empty, in which case the backend substitutes its own
/// configured default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_new_tokens: u32,
}

/// Prompt/completion token counts for one call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl Add for TokenUsage {
    type Output = TokenUsage;
    fn add(self, rhs: TokenUsage) -> TokenUsage {
        TokenUsage {
            prompt_tokens: self.prompt_tokens + rhs.prompt_tokens,
            completion_tokens: self.completion_tokens + rhs.completion_tokens,
        }
    }
}

impl AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: TokenUsage) {
        *self = *self + rhs;
    }
}

/// Completion text plus its token accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: TokenUsage,
}

/// Error from a backend call. `retryable` distinguishes transient transport
/// failures (worth another attempt) from permanent ones.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("backend error ({}): {detail}", if *.retryable { "retryable" } else { "permanent" })]
pub struct BackendError {
    pub retryable: bool,
    pub detail: String,
}

impl BackendError {
    pub fn retryable(detail: impl Into<String>) -> Self {
        Self {
            retryable: true,
            detail: detail.into(),
        }
    }

    pub fn permanent(detail: impl Into<String>) -> Self {
        Self {
            retryable: false,
            detail: detail.into(),
        }
    }
}

/// A chat-completion provider. Implementations must be safe to call from
/// multiple worker threads at once.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }
}

/// Deterministic token estimate: `ceil(character_count / 4)`.
///
/// Used for scripted backends and as the fallback when a wire response
/// carries no usage block. Characters are Unicode scalars.
pub fn count_tokens(text: &str) -> u64 {
    let chars = text.chars().count() as u64;
    chars.div_ceil(4)
}

/// Retries `call` on retryable errors with exponential backoff
/// (`base_backoff * 2^attempt` after the attempt numbered `attempt`, counting
/// from zero). Permanent errors and success return immediately. At most
/// `max_attempts` calls are made.
pub(crate) fn retry_with_backoff<T>(
    max_attempts: u32,
    base_backoff: Duration,
    mut call: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    assert!(max_attempts >= 1, "max_attempts must be at least 1");
    let mut attempt = 0u32;
    loop {
        match call() {
            Ok(value) => return Ok(value),
            Err(err) if err.retryable && attempt + 1 < max_attempts => {
                let backoff = base_backoff * 2u32.saturating_pow(attempt);
                if !backoff.is_zero() {
                    std::thread::sleep(backoff);
                }
                attempt += 1;
            }
            Err(err) => return Err(err),
        }
    }
}

/// Calls `backend` with retries on retryable errors (exponential backoff,
/// `base_backoff * 2^attempt`). Non-retryable errors surface immediately.
pub fn with_retry(
    backend: &dyn Backend,
    request: &ChatRequest,
    max_attempts: u32,
    base_backoff: Duration,
) -> Result<ChatResponse, BackendError> {
    retry_with_backoff(max_attempts, base_backoff, || backend.complete(request))
}

/// Pass-through wrapper that records every request and accumulates usage.
/// Useful for asserting traffic order and for cross-checking token totals.
pub struct RecordingBackend<B> {
    inner: B,
    calls: Mutex<Vec<ChatRequest>>,
    usage: Mutex<TokenUsage>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: Mutex::new(Vec::new()),
            usage: Mutex::new(TokenUsage::default()),
        }
    }

    /// Requests seen so far, in arrival order.
    pub fn calls(&self) -> Vec<ChatRequest> {
        self.calls.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    /// Sum of usage over all successful calls.
    pub fn total_usage(&self) -> TokenUsage {
        *self.usage.lock().unwrap()
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.lock().unwrap().push(request.clone());
        let response = self.inner.complete(request)?;
        *self.usage.lock().unwrap() += response.usage;
        Ok(response)
    }
}
