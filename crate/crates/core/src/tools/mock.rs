use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::ToolCall;

/// One scripted tool response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub tool: String,
    /// Arguments must contain this value (object keys matched recursively).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<Value>,
    /// Substring of the compact argument JSON.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    pub body: String,
    /// Keep matching after the first hit.
    #[serde(default)]
    pub repeat: bool,
}

impl MockRule {
    pub fn new(tool: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            tool: tool.into(),
            when: None,
            contains: None,
            body: body.into(),
            repeat: false,
        }
    }

    pub fn when(mut self, pattern: Value) -> Self {
        self.when = Some(pattern);
        self
    }

    pub fn containing(mut self, needle: impl Into<String>) -> Self {
        self.contains = Some(needle.into());
        self
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }

    fn matches(&self, call: &ToolCall) -> bool {
        if self.tool != call.name {
            return false;
        }
        if let Some(pattern) = &self.when {
            if !subset_match(pattern, &call.arguments) {
                return false;
            }
        }
        match &self.contains {
            Some(needle) => call.arguments.to_string().contains(needle.as_str()),
            None => true,
        }
    }
}

fn subset_match(pattern: &Value, value: &Value) -> bool {
    match (pattern, value) {
        (Value::Object(p), Value::Object(v)) => p
            .iter()
            .all(|(k, pv)| v.get(k).is_some_and(|vv| subset_match(pv, vv))),
        _ => pattern == value,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub default_body: String,
}

/// Deterministic stand-in for the external tool services.
///
/// The first unconsumed rule matching a call answers it; one-shot rules are
/// then consumed. Calls no rule matches get `default_body`.
#[derive(Debug, Clone)]
pub struct MockEnvironment {
    script: MockScript,
    consumed: Vec<bool>,
}

impl MockEnvironment {
    pub fn new(script: MockScript) -> Self {
        let consumed = vec![false; script.rules.len()];
        Self { script, consumed }
    }

    pub fn with_default(body: impl Into<String>) -> Self {
        Self::new(MockScript {
            rules: Vec::new(),
            default_body: body.into(),
        })
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    pub fn respond(&mut self, call: &ToolCall) -> String {
        for (i, rule) in self.script.rules.iter().enumerate() {
            if !self.consumed[i] && rule.matches(call) {
                if !rule.repeat {
                    self.consumed[i] = true;
                }
                return rule.body.clone();
            }
        }
        self.script.default_body.clone()
    }

    /// Restores every rule, as if freshly loaded.
    pub fn reset(&mut self) {
        self.consumed.iter_mut().for_each(|c| *c = false);
    }
}
