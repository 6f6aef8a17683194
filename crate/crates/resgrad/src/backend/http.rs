//! OpenAI-compatible HTTP backend.
//!
//! Sends `POST {base_url}/chat/completions` with exactly the fields `model`,
//! `messages` (one system plus one user entry), `temperature`, and
//! `max_tokens`, and reads the completion from `choices[0].message.content`.
//! Token usage comes from the response's `usage` block; when the server
//! omits it, the char-based estimate fills in. Transient failures (transport
//! errors, HTTP 429 and 5xx) are retried with exponential backoff.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{count_tokens, retry_with_backoff, Backend, BackendError, ChatRequest, ChatResponse, TokenUsage};

/// Environment variable holding the bearer token. Read once at construction
/// and sent only as the `Authorization` header; never logged or echoed.
pub const API_KEY_ENV: &str = "RESGRAD_API_KEY";

/// Connection settings for an OpenAI-compatible endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Endpoint root, e.g. `https://api.example.com/v1`.
    pub base_url: String,
    /// Model substituted when a request does not name one.
    pub model: String,
    /// Total call attempts per request (first try included).
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    /// Base of the exponential backoff between attempts.
    #[serde(default = "default_backoff_ms")]
    pub base_backoff_ms: u64,
    /// Per-call timeout.
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_max_attempts() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    200
}

fn default_timeout_ms() -> u64 {
    60_000
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

/// Exact wire body: no extra fields, nothing optional.
#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: [WireMessage<'a>; 2],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

/// Blocking HTTP chat-completion client.
pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    /// Builds a client for `config`, picking up the API key from
    /// [`API_KEY_ENV`] if set.
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::permanent(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            config,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            client,
        })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn send_once(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let model = if request.model.is_empty() {
            &self.config.model
        } else {
            &request.model
        };
        let body = WireRequest {
            model,
            messages: [
                WireMessage {
                    role: "system",
                    content: &request.system,
                },
                WireMessage {
                    role: "user",
                    content: &request.user,
                },
            ],
            temperature: request.temperature,
            max_tokens: request.max_new_tokens,
        };

        let mut call = self.client.post(self.endpoint()).json(&body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }

        // Transport-level failures are transient by nature: worth retrying.
        let response = call
            .send()
            .map_err(|e| BackendError::retryable(format!("transport error: {e}")))?;

        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::retryable(format!(
                "server responded {status}"
            )));
        }
        if !status.is_success() {
            return Err(BackendError::permanent(format!(
                "server responded {status}"
            )));
        }

        let parsed: WireResponse = response
            .json()
            .map_err(|e| BackendError::permanent(format!("malformed response body: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::permanent("response carried no choices".to_string()))?;
        let text = choice.message.content;

        let usage = match parsed.usage {
            Some(u) => TokenUsage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            },
            // Fallback estimate, used only when the wire protocol supplies
            // no usage block.
            None => TokenUsage {
                prompt_tokens: count_tokens(&request.system) + count_tokens(&request.user),
                completion_tokens: count_tokens(&text),
            },
        };

        Ok(ChatResponse { text, usage })
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        retry_with_backoff(
            self.config.max_attempts,
            Duration::from_millis(self.config.base_backoff_ms),
            || self.send_once(request),
        )
    }
}
