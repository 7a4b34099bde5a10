//! Chat-completion backends.

mod openai;
mod retry;
mod scripted;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use openai::OpenAiBackend;
pub use retry::RetryingBackend;
pub use scripted::{ScriptEntry, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u32,
    #[serde(default)]
    pub model_id: String,
}

impl SamplingParams {
    /// Runtime sampling used by both the agent and the engine.
    pub fn runtime() -> Self {
        Self {
            temperature: 0.6,
            top_p: 0.95,
            max_output_tokens: 8192,
            model_id: String::new(),
        }
    }

    /// Higher-diversity profile for collecting preference trajectories.
    pub fn exploration() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.9,
            ..Self::runtime()
        }
    }

    pub fn with_model(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    pub fn check(&self) -> Result<(), BackendError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::InvalidRequest("top_p must be in (0, 1]".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self::runtime()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: usize,
    pub output_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub usage: Usage,
}

impl Completion {
    /// Sum of token log-probabilities, when the backend returned them.
    pub fn logprob_sum(&self) -> Option<f64> {
        self.token_logprobs
            .as_ref()
            .map(|lps| lps.iter().map(|t| t.logprob).sum())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("prompt of {prompt_tokens} tokens exceeds the context limit of {limit}")]
    ContextOverflow { prompt_tokens: usize, limit: usize },
    #[error("rate limited (retry after {retry_after_ms:?} ms)")]
    RateLimited { retry_after_ms: Option<u64> },
    #[error("scripted prompt assertion failed at call {ordinal}: expected {expected:?} in prompt")]
    PromptAssertion { ordinal: usize, expected: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed backend response: {0}")]
    BadResponse(String),
}

/// A chat-completion endpoint. Implementations synchronize internally so a
/// single backend can serve several runs.
pub trait ChatBackend: Send + Sync {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<Completion, BackendError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<Completion, BackendError> {
        (**self).complete(messages, params)
    }
}

pub(crate) fn check_messages(messages: &[ChatMessage]) -> Result<(), BackendError> {
    match messages.first() {
        None => Err(BackendError::InvalidRequest("no messages".into())),
        Some(m) if m.role != Role::System => Err(BackendError::InvalidRequest(
            "first message must be the system prompt".into(),
        )),
        Some(_) => Ok(()),
    }
}

/// Token counting used for context budgets.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// `ceil(chars / 4)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ApproxCounter;

impl TokenCounter for ApproxCounter {
    fn count(&self, text: &str) -> usize {
        text.chars().count().div_ceil(4)
    }
}

pub fn count_tokens(text: &str, counter: &dyn TokenCounter) -> usize {
    counter.count(text)
}

/// Tokens of a whole prompt, summed per message.
pub fn prompt_tokens(messages: &[ChatMessage], counter: &dyn TokenCounter) -> usize {
    messages.iter().map(|m| counter.count(&m.content)).sum()
}
