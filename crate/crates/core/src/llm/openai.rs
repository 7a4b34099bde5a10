use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Serialize;
use serde_json::Value;

use super::{
    check_messages, BackendError, ChatBackend, ChatMessage, Completion, SamplingParams,
    TokenLogprob, Usage,
};

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
#[derive(Debug, Clone)]
pub struct OpenAiBackend {
    base_url: String,
    api_key: Option<String>,
    request_logprobs: bool,
    client: Client,
}

#[derive(Serialize)]
struct RequestBody<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    logprobs: bool,
}

impl OpenAiBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| BackendError::BackendUnavailable(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            request_logprobs: false,
            client,
        })
    }

    /// Reads the bearer token from `api_key_env`, if it is set.
    pub fn from_env(base_url: impl Into<String>, api_key_env: &str) -> Result<Self, BackendError> {
        Self::new(base_url, std::env::var(api_key_env).ok())
    }

    /// Ask for token log-probabilities (needed for trajectory bookkeeping).
    pub fn with_logprobs(mut self, enabled: bool) -> Self {
        self.request_logprobs = enabled;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Result<Self, BackendError> {
        self.client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::BackendUnavailable(e.to_string()))?;
        Ok(self)
    }

    pub fn request_body(&self, messages: &[ChatMessage], params: &SamplingParams) -> Value {
        serde_json::to_value(RequestBody {
            model: &params.model_id,
            messages,
            temperature: params.temperature,
            top_p: params.top_p,
            max_tokens: params.max_output_tokens,
            logprobs: self.request_logprobs,
        })
        .expect("request serializes")
    }
}

fn parse_response(body: &Value) -> Result<Completion, BackendError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::BadResponse("no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::BadResponse("choice has no message content".into()))?
        .to_string();
    let token_logprobs = choice
        .pointer("/logprobs/content")
        .and_then(Value::as_array)
        .map(|items| {
            items
                .iter()
                .map(|t| TokenLogprob {
                    token: t.get("token").and_then(Value::as_str).unwrap_or_default().to_string(),
                    logprob: t.get("logprob").and_then(Value::as_f64).unwrap_or(0.0).min(0.0),
                })
                .collect()
        });
    let usage = Usage {
        prompt_tokens: body.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0)
            as usize,
        output_tokens: body
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0) as usize,
    };
    Ok(Completion { text, token_logprobs, usage })
}

impl ChatBackend for OpenAiBackend {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<Completion, BackendError> {
        check_messages(messages)?;
        params.check()?;
        let url = format!("{}/chat/completions", self.base_url);
        let mut req = self.client.post(&url).json(&self.request_body(messages, params));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| BackendError::BackendUnavailable(format!("{url}: {e}")))?;
        let status = resp.status();
        let retry_after_ms = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok())
            .map(|secs| (secs * 1000.0) as u64);
        let text = resp
            .text()
            .map_err(|e| BackendError::BackendUnavailable(e.to_string()))?;

        match status {
            s if s.is_success() => {
                let body: Value = serde_json::from_str(&text)
                    .map_err(|e| BackendError::BadResponse(e.to_string()))?;
                parse_response(&body)
            }
            StatusCode::TOO_MANY_REQUESTS => Err(BackendError::RateLimited { retry_after_ms }),
            StatusCode::BAD_REQUEST if text.contains("context") => {
                Err(BackendError::ContextOverflow {
                    prompt_tokens: 0,
                    limit: extract_limit(&text).unwrap_or(0),
                })
            }
            s if s.is_server_error() => {
                Err(BackendError::BackendUnavailable(format!("{url}: HTTP {s}")))
            }
            s => Err(BackendError::InvalidRequest(format!("HTTP {s}: {text}"))),
        }
    }
}

/// Pulls "maximum context length is N" out of an error message.
fn extract_limit(text: &str) -> Option<usize> {
    let idx = text.find("context length is ")?;
    text[idx + "context length is ".len()..]
        .split(|c: char| !c.is_ascii_digit())
        .next()?
        .parse()
        .ok()
}
