//! Deterministic scripted backend.
//!
//! A [`ScriptTable`] maps incoming requests to canned completions by ordered
//! substring rules over the system + user text, first match wins. Rules may
//! be restricted to a window of matching calls (e.g. "fail on the first two
//! calls that mention X, then succeed"), and may yield errors instead of
//! text, which makes retry and failure paths scriptable. A fallback response
//! is mandatory so the table is total: every request gets an answer.
//!
//! The table never consults the clock and holds no hidden randomness, so
//! identical call sequences produce identical responses.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{count_tokens, Backend, BackendError, ChatRequest, ChatResponse, TokenUsage};

/// What a matching rule yields: a canned completion or a scripted error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptResponse {
    /// Canned completion text; usage is derived via [`count_tokens`].
    Text(String),
    /// Scripted failure, retryable or permanent.
    Error { retryable: bool, detail: String },
}

/// One ordered matching rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Substring searched in `system + "\n" + user`.
    pub pattern: String,
    #[serde(flatten)]
    pub response: ScriptResponse,
    /// Window over the per-pattern match count (1-based): the rule applies
    /// only from the `min_call`-th matching request on. Default 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_call: Option<u64>,
    /// Last matching request the rule applies to. Default: unbounded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_call: Option<u64>,
}

impl ScriptRule {
    /// Rule answering `text` whenever `pattern` matches.
    pub fn text(pattern: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            response: ScriptResponse::Text(text.into()),
            min_call: None,
            max_call: None,
        }
    }

    /// Rule failing with a scripted error whenever `pattern` matches.
    pub fn error(pattern: impl Into<String>, retryable: bool, detail: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            response: ScriptResponse::Error {
                retryable,
                detail: detail.into(),
            },
            min_call: None,
            max_call: None,
        }
    }

    /// Restricts the rule to matching calls numbered `min..=max` (1-based).
    pub fn on_calls(mut self, min: u64, max: u64) -> Self {
        self.min_call = Some(min);
        self.max_call = Some(max);
        self
    }
}

/// Error raised when loading a script file.
#[derive(Debug, thiserror::Error)]
pub enum ScriptFileError {
    #[error("cannot read script file `{path}`: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("script file `{path}` is not valid JSON: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

/// Ordered-rule scripted backend with a mandatory fallback.
#[derive(Debug, Serialize, Deserialize)]
pub struct ScriptTable {
    rules: Vec<ScriptRule>,
    /// Completion used when no rule matches; keeps the table total.
    fallback: String,
    /// Requests seen per pattern, for call-window rules. Runtime state only.
    #[serde(skip)]
    counts: Mutex<HashMap<String, u64>>,
}

impl ScriptTable {
    pub fn new(rules: Vec<ScriptRule>, fallback: impl Into<String>) -> Self {
        Self {
            rules,
            fallback: fallback.into(),
            counts: Mutex::new(HashMap::new()),
        }
    }

    /// Table that answers every request with the same completion.
    pub fn fallback_only(fallback: impl Into<String>) -> Self {
        Self::new(Vec::new(), fallback)
    }

    /// Loads a table from its JSON file form (`{"rules": [...], "fallback": "..."}`).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScriptFileError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScriptFileError::Read {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ScriptFileError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    /// Clears all per-pattern call counters.
    pub fn reset_counts(&self) {
        self.counts.lock().unwrap().clear();
    }

    fn respond(request: &ChatRequest, text: &str) -> ChatResponse {
        ChatResponse {
            text: text.to_owned(),
            usage: TokenUsage {
                prompt_tokens: count_tokens(&request.system) + count_tokens(&request.user),
                completion_tokens: count_tokens(text),
            },
        }
    }
}

impl Backend for ScriptTable {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let hay = format!("{}\n{}", request.system, request.user);
        // Counter updates are serialized under one lock so concurrent callers
        // still see strictly increasing per-pattern counts.
        let mut counts = self.counts.lock().unwrap();

        // Every distinct pattern present in the request counts one matching
        // call, no matter which rule ends up answering.
        let mut bumped: HashSet<&str> = HashSet::new();
        for rule in &self.rules {
            if bumped.insert(rule.pattern.as_str()) && hay.contains(&rule.pattern) {
                *counts.entry(rule.pattern.clone()).or_insert(0) += 1;
            }
        }

        for rule in &self.rules {
            if !hay.contains(&rule.pattern) {
                continue;
            }
            let n = counts.get(&rule.pattern).copied().unwrap_or(0);
            if n < rule.min_call.unwrap_or(1) || n > rule.max_call.unwrap_or(u64::MAX) {
                continue;
            }
            return match &rule.response {
                ScriptResponse::Text(text) => Ok(Self::respond(request, text)),
                ScriptResponse::Error { retryable, detail } => Err(BackendError {
                    retryable: *retryable,
                    detail: detail.clone(),
                }),
            };
        }

        Ok(Self::respond(request, &self.fallback))
    }
}
