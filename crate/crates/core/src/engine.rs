//! The reconfiguration engine: request plus history in, next configuration out.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::config::{
    resolve_knowledge, validate_toolbox, GlobalHistoryPool, GlobalToolPool, ReconfigRequest,
    StageConfiguration,
};
use crate::llm::{BackendError, ChatBackend, ChatMessage, SamplingParams, Usage};
use crate::prompt::{render_reconfig_prompt, PromptError, PromptTemplates};

/// Corrective re-prompts after the first malformed output.
pub const ENGINE_RETRIES: usize = 2;

const OUTPUT_KEYS: [&str; 4] = [
    "next_sub_goal",
    "execution_strategy",
    "toolbox",
    "inter_agent_knowledge",
];

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("no JSON object found in engine output")]
    NoStructuredBlock,
    #[error("engine output invalid after {attempts} attempts: {reason}")]
    EngineOutputInvalid { reason: String, attempts: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// The engine's four-field answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineOutput {
    pub next_sub_goal: String,
    pub execution_strategy: String,
    pub toolbox: Vec<String>,
    pub inter_agent_knowledge: String,
}

impl EngineOutput {
    /// Parses and structurally checks raw engine text. Pool rules are
    /// checked separately.
    pub fn parse(text: &str) -> Result<Self, String> {
        let obj = extract_structured_block(text).map_err(|e| e.to_string())?;
        let extra: Vec<&str> = obj
            .keys()
            .map(String::as_str)
            .filter(|k| !OUTPUT_KEYS.contains(k))
            .collect();
        if !extra.is_empty() {
            return Err(format!("unexpected keys: {}", extra.join(", ")));
        }
        if let Some(missing) = OUTPUT_KEYS.iter().find(|k| !obj.contains_key(**k)) {
            return Err(format!("missing key `{missing}`"));
        }
        let out: EngineOutput = serde_json::from_value(Value::Object(obj))
            .map_err(|e| format!("wrong field type: {e}"))?;
        if out.next_sub_goal.trim().is_empty() {
            return Err("`next_sub_goal` is empty".into());
        }
        if out.execution_strategy.trim().is_empty() {
            return Err("`execution_strategy` is empty".into());
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("engine output serializes")
    }
}

fn strip_fences(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

// End of the balanced object starting at `start`, skipping braces in strings.
fn balanced_end(s: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in s[start..].char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// First balanced top-level JSON object in `text`, ignoring code fences and
/// surrounding prose.
pub fn extract_structured_block(text: &str) -> Result<Map<String, Value>, EngineError> {
    let body = strip_fences(text);
    for (start, _) in body.match_indices('{') {
        let Some(end) = balanced_end(&body, start) else { continue };
        if let Ok(Value::Object(map)) = serde_json::from_str(&body[start..end]) {
            return Ok(map);
        }
    }
    Err(EngineError::NoStructuredBlock)
}

/// Everything recorded about one engine invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineCall {
    pub config: StageConfiguration,
    /// Validated output, knowledge still as a directive.
    pub output: EngineOutput,
    /// The rendered prompt of the first attempt.
    pub prompt: Vec<ChatMessage>,
    pub attempts: usize,
    /// `Some(true)` when the proposed sub-goal was taken verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adopted: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub struct ReconfigEngine {
    backend: Arc<dyn ChatBackend>,
    params: SamplingParams,
    templates: PromptTemplates,
    retries: usize,
    enforce_min: bool,
}

impl ReconfigEngine {
    pub fn new(backend: Arc<dyn ChatBackend>, params: SamplingParams, templates: PromptTemplates) -> Self {
        Self {
            backend,
            params,
            templates,
            retries: ENGINE_RETRIES,
            enforce_min: true,
        }
    }

    /// Whether toolboxes below the three-tool minimum are rejected.
    pub fn with_toolbox_minimum(mut self, enforce: bool) -> Self {
        self.enforce_min = enforce;
        self
    }

    pub fn with_retries(mut self, retries: usize) -> Self {
        self.retries = retries;
        self
    }

    pub fn params(&self) -> &SamplingParams {
        &self.params
    }

    /// Produces the configuration for stage `history.len()`.
    pub fn reconfigure(
        &self,
        task: &str,
        pool: &GlobalToolPool,
        history: &GlobalHistoryPool,
        request: Option<&ReconfigRequest>,
    ) -> Result<EngineCall, EngineError> {
        let prompt = render_reconfig_prompt(&self.templates, task, pool, history, request)?.messages();
        let mut messages = prompt.clone();
        let mut usage = Usage::default();
        let mut reason = String::new();
        for attempt in 1..=self.retries + 1 {
            let completion = self.backend.complete(&messages, &self.params)?;
            usage.prompt_tokens += completion.usage.prompt_tokens;
            usage.output_tokens += completion.usage.output_tokens;
            match validate(&completion.text, pool, history, self.enforce_min) {
                Ok((output, config, warnings)) => {
                    for w in &warnings {
                        log::warn!("{w}");
                    }
                    let adopted = request.map(|r| output.next_sub_goal == r.proposed_sub_goal);
                    return Ok(EngineCall {
                        config,
                        output,
                        prompt,
                        attempts: attempt,
                        adopted,
                        logprob: completion.logprob_sum(),
                        usage,
                        warnings,
                    });
                }
                Err(why) => {
                    log::warn!("engine output rejected (attempt {attempt}): {why}");
                    messages.push(ChatMessage::assistant(completion.text));
                    messages.push(ChatMessage::user(format!(
                        "Your last output was not a valid configuration: {why}. Respond again \
                         with only a JSON object holding exactly the keys next_sub_goal, \
                         execution_strategy, toolbox and inter_agent_knowledge."
                    )));
                    reason = why;
                }
            }
        }
        Err(EngineError::EngineOutputInvalid {
            reason,
            attempts: self.retries + 1,
        })
    }
}

fn validate(
    text: &str,
    pool: &GlobalToolPool,
    history: &GlobalHistoryPool,
    enforce_min: bool,
) -> Result<(EngineOutput, StageConfiguration, Vec<String>), String> {
    let mut output = EngineOutput::parse(text)?;
    let toolbox = validate_toolbox(&output.toolbox, pool, enforce_min).map_err(|e| e.to_string())?;
    let mut warnings = Vec::new();
    if history.is_empty() && !output.inter_agent_knowledge.is_empty() {
        warnings.push(format!(
            "initial configuration proposed knowledge {:?}; using \"\"",
            output.inter_agent_knowledge
        ));
        output.inter_agent_knowledge.clear();
    }
    let config = StageConfiguration {
        stage_index: history.len(),
        sub_goal: output.next_sub_goal.clone(),
        strategy: output.execution_strategy.clone(),
        toolbox,
        knowledge: resolve_knowledge(&output.inter_agent_knowledge, history),
    };
    Ok((output, config, warnings))
}
