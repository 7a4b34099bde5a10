use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{
    check_messages, prompt_tokens, ApproxCounter, BackendError, ChatBackend, ChatMessage,
    Completion, SamplingParams, TokenCounter, TokenLogprob, Usage,
};

/// One scripted completion, keyed by its call ordinal.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub text: String,
    /// Substrings that must occur somewhere in the prompt for this call.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub expect_contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
}

impl ScriptEntry {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Self::default()
        }
    }

    pub fn expecting(mut self, needle: impl Into<String>) -> Self {
        self.expect_contains.push(needle.into());
        self
    }
}

#[derive(Debug, Default)]
struct State {
    cursor: usize,
    prompts: Vec<Vec<ChatMessage>>,
}

/// Replays a fixed list of completions in order.
pub struct ScriptedBackend {
    name: String,
    entries: Vec<ScriptEntry>,
    counter: Arc<dyn TokenCounter>,
    context_limit: Option<usize>,
    check_assertions: bool,
    state: Mutex<State>,
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("name", &self.name)
            .field("entries", &self.entries.len())
            .field("context_limit", &self.context_limit)
            .finish()
    }
}

impl ScriptedBackend {
    pub fn new(name: impl Into<String>, entries: Vec<ScriptEntry>) -> Self {
        Self {
            name: name.into(),
            entries,
            counter: Arc::new(ApproxCounter),
            context_limit: None,
            check_assertions: true,
            state: Mutex::new(State::default()),
        }
    }

    pub fn from_texts<S: Into<String>>(name: &str, texts: impl IntoIterator<Item = S>) -> Self {
        Self::new(name, texts.into_iter().map(ScriptEntry::text).collect())
    }

    pub fn with_counter(mut self, counter: Arc<dyn TokenCounter>) -> Self {
        self.counter = counter;
        self
    }

    /// Rejects prompts larger than `limit` tokens with `ContextOverflow`.
    pub fn with_context_limit(mut self, limit: usize) -> Self {
        self.context_limit = Some(limit);
        self
    }

    pub fn with_assertions(mut self, enabled: bool) -> Self {
        self.check_assertions = enabled;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn calls(&self) -> usize {
        self.state.lock().unwrap().cursor
    }

    pub fn remaining(&self) -> usize {
        self.entries.len().saturating_sub(self.calls())
    }

    /// Every prompt received so far, in call order.
    pub fn prompts(&self) -> Vec<Vec<ChatMessage>> {
        self.state.lock().unwrap().prompts.clone()
    }

    pub fn reset(&self) {
        *self.state.lock().unwrap() = State::default();
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<Completion, BackendError> {
        check_messages(messages)?;
        params.check()?;
        let prompt_tokens = prompt_tokens(messages, self.counter.as_ref());
        if let Some(limit) = self.context_limit {
            if prompt_tokens > limit {
                return Err(BackendError::ContextOverflow { prompt_tokens, limit });
            }
        }

        let mut state = self.state.lock().unwrap();
        let ordinal = state.cursor;
        let entry = self.entries.get(ordinal).ok_or_else(|| {
            BackendError::BackendUnavailable(format!(
                "script `{}` exhausted after {} completions",
                self.name,
                self.entries.len()
            ))
        })?;
        if self.check_assertions {
            for needle in &entry.expect_contains {
                if !messages.iter().any(|m| m.content.contains(needle.as_str())) {
                    return Err(BackendError::PromptAssertion {
                        ordinal,
                        expected: needle.clone(),
                    });
                }
            }
        }
        state.cursor += 1;
        state.prompts.push(messages.to_vec());
        Ok(Completion {
            text: entry.text.clone(),
            token_logprobs: entry.token_logprobs.clone(),
            usage: Usage {
                prompt_tokens,
                output_tokens: self.counter.count(&entry.text),
            },
        })
    }
}
