//! ReAct turn codec.
//!
//! An assistant turn is a `<think>` block followed by exactly one
//! `<tool_call>` block whose body is `{"name": ..., "arguments": {...}}`.
//! Environment output goes back to the model wrapped in `<tool_response>`.

mod schema;

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use schema::{validate_call, JsonType, ParamSchema, ToolSchema, TypeSpec};

const TOOLS_ASSET: &str = include_str!("../../assets/tools.json");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("no <tool_call> block in assistant output")]
    NoToolCall,
    #[error("assistant output contains {0} <tool_call> blocks; exactly one is allowed")]
    MultipleToolCalls(usize),
    #[error("malformed tool call payload: {0}")]
    MalformedPayload(String),
    #[error("missing required property `{0}`")]
    MissingRequired(String),
    #[error("property `{0}` has the wrong type")]
    TypeMismatch(String),
    #[error("property `{0}` has value {1} which is not one of the allowed values")]
    EnumViolation(String, String),
    #[error("unknown property `{0}`")]
    UnknownProperty(String),
    #[error("property `{0}` has too few items")]
    TooFewItems(String),
    #[error("call to `{call}` checked against schema `{schema}`")]
    SchemaMismatch { call: String, schema: String },
    #[error("invalid tool schema: {0}")]
    InvalidSchema(String),
    #[error("text is not wrapped in <tool_response> tags")]
    NotAToolResponse,
}

/// A single tool invocation. `arguments` is always a JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    pub arguments: Value,
}

impl ToolCall {
    pub fn new(name: impl Into<String>, arguments: Value) -> Self {
        Self {
            name: name.into(),
            arguments,
        }
    }

    pub fn arg_str(&self, key: &str) -> Option<&str> {
        self.arguments.get(key).and_then(Value::as_str)
    }

    pub fn to_payload(&self) -> String {
        serde_json::to_string(self).expect("tool call serializes")
    }
}

/// Thought plus the single action of one ReAct step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistantTurn {
    pub thought: String,
    pub call: ToolCall,
}

/// The six task tools plus `reconfigure` and `finish`.
pub fn default_schemas() -> Vec<ToolSchema> {
    static SCHEMAS: OnceLock<Vec<ToolSchema>> = OnceLock::new();
    SCHEMAS
        .get_or_init(|| ToolSchema::load_all(TOOLS_ASSET).expect("bundled tool schemas are valid"))
        .clone()
}

fn think_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)<think>(.*?)</think>").unwrap())
}

fn tool_call_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)<tool_call>(.*?)</tool_call>").unwrap())
}

/// Parses one assistant completion into a thought and a tool call.
pub fn parse_assistant_turn(raw: &str) -> Result<AssistantTurn, CodecError> {
    let thought = think_re()
        .captures_iter(raw)
        .last()
        .map(|c| c[1].trim().to_string())
        .unwrap_or_default();

    let blocks: Vec<&str> = tool_call_re()
        .captures_iter(raw)
        .map(|c| c.get(1).unwrap().as_str())
        .collect();
    let body = match blocks.as_slice() {
        [] => return Err(CodecError::NoToolCall),
        [one] => one.trim(),
        many => return Err(CodecError::MultipleToolCalls(many.len())),
    };

    let payload: Value =
        serde_json::from_str(body).map_err(|e| CodecError::MalformedPayload(e.to_string()))?;
    let Value::Object(mut map) = payload else {
        return Err(CodecError::MalformedPayload("payload is not an object".into()));
    };
    let name = match map.remove("name") {
        Some(Value::String(s)) if !s.is_empty() => s,
        Some(_) => return Err(CodecError::MalformedPayload("`name` is not a string".into())),
        None => return Err(CodecError::MalformedPayload("missing `name`".into())),
    };
    let arguments = match map.remove("arguments") {
        Some(v @ Value::Object(_)) => v,
        // Some backends send arguments as an encoded JSON string.
        Some(Value::String(s)) => match serde_json::from_str::<Value>(&s) {
            Ok(v @ Value::Object(_)) => v,
            _ => {
                return Err(CodecError::MalformedPayload(
                    "`arguments` string is not a JSON object".into(),
                ))
            }
        },
        Some(_) => {
            return Err(CodecError::MalformedPayload(
                "`arguments` is not an object".into(),
            ))
        }
        None => return Err(CodecError::MalformedPayload("missing `arguments`".into())),
    };
    if !map.is_empty() {
        let extra: Vec<&String> = map.keys().collect();
        log::warn!("ignoring extra tool-call payload keys: {extra:?}");
    }
    Ok(AssistantTurn {
        thought,
        call: ToolCall { name, arguments },
    })
}

/// Emits a turn in the format `parse_assistant_turn` reads.
pub fn render_assistant_turn(turn: &AssistantTurn) -> String {
    format!(
        "<think>\n{}\n</think>\n<tool_call>\n{}\n</tool_call>",
        turn.thought,
        turn.call.to_payload()
    )
}

fn closing_tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<(\\*)/tool_response>").unwrap())
}

fn escaped_tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<\\(\\*)/tool_response>").unwrap())
}

/// `</tool_response>` becomes `<\/tool_response>`; an already-escaped form
/// gains one more backslash so that unescaping is exact.
fn escape_observation(text: &str) -> String {
    closing_tag_re()
        .replace_all(text, |c: &regex::Captures| {
            format!("<\\{}/tool_response>", &c[1])
        })
        .into_owned()
}

fn unescape_observation(text: &str) -> String {
    escaped_tag_re()
        .replace_all(text, |c: &regex::Captures| format!("<{}/tool_response>", &c[1]))
        .into_owned()
}

pub fn render_tool_response(observation: &str) -> String {
    format!(
        "<tool_response>\n{}\n</tool_response>",
        escape_observation(observation)
    )
}

/// Inverse of [`render_tool_response`].
pub fn parse_tool_response(text: &str) -> Result<String, CodecError> {
    let inner = text
        .strip_prefix("<tool_response>\n")
        .and_then(|t| t.strip_suffix("\n</tool_response>"))
        .ok_or(CodecError::NotAToolResponse)?;
    Ok(unescape_observation(inner))
}
