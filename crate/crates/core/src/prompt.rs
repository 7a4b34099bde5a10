//! Prompt rendering for the inference agent and the reconfiguration engine.
//!
//! Templates are plain UTF-8 files with `{PLACEHOLDER}` slots. The bundled
//! copies live under `assets/prompts/`; [`PromptTemplates::load_dir`] reads
//! replacements from disk so prompt edits do not need a rebuild.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::codec::ToolSchema;
use crate::config::{
    GlobalHistoryPool, GlobalToolPool, ReconfigRequest, StageConfiguration, FINISH_TOOL,
    RECONFIGURE_TOOL,
};
use crate::llm::ChatMessage;

/// Slot value used when the history or the update requirement is empty.
pub const EMPTY_SLOT: &str = "NONE";

/// User turn sent to the engine after its system prompt.
pub const ENGINE_USER_INSTRUCTION: &str =
    "Generate the configuration for the next stage. Respond with the JSON object only.";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no schema for toolbox tool `{0}`")]
    MissingSchema(String),
    #[error("template `{template}` has no value for slot {{{slot}}}")]
    UnfilledPlaceholder { template: String, slot: String },
    #[error("failed to read template `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub inference_system: String,
    pub reconfig_system: String,
    pub react_user_prefix: String,
    pub react_user_suffix: String,
}

fn normalize(text: &str) -> String {
    let text = text.replace("\r\n", "\n").replace('\r', "\n");
    text.strip_suffix('\n').map(str::to_string).unwrap_or(text)
}

impl PromptTemplates {
    pub const ROLES: [&'static str; 4] = [
        "inference_system",
        "reconfig_system",
        "react_user_prefix",
        "react_user_suffix",
    ];

    pub fn builtin() -> Self {
        Self {
            inference_system: normalize(include_str!("../assets/prompts/inference_system.txt")),
            reconfig_system: normalize(include_str!("../assets/prompts/reconfig_system.txt")),
            react_user_prefix: normalize(include_str!("../assets/prompts/react_user_prefix.txt")),
            react_user_suffix: normalize(include_str!("../assets/prompts/react_user_suffix.txt")),
        }
    }

    /// Reads `<role>.txt` for every role; missing files fall back to the
    /// bundled template.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut out = Self::builtin();
        for role in Self::ROLES {
            let path = dir.join(format!("{role}.txt"));
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let text = normalize(&text);
            match role {
                "inference_system" => out.inference_system = text,
                "reconfig_system" => out.reconfig_system = text,
                "react_user_prefix" => out.react_user_prefix = text,
                _ => out.react_user_suffix = text,
            }
        }
        Ok(out)
    }
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::builtin()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_prefix: String,
    pub user_suffix: String,
    pub tool_block: String,
}

impl PromptBundle {
    /// The user turn: prefix, tool block, and suffix separated by blank lines.
    pub fn user_text(&self) -> String {
        [&self.user_prefix, &self.tool_block, &self.user_suffix]
            .into_iter()
            .filter(|s| !s.is_empty())
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![
            ChatMessage::system(self.system_text.clone()),
            ChatMessage::user(self.user_text()),
        ]
    }
}

fn slot_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Z][A-Z_]*)\}").unwrap())
}

/// Single pass: inserted values are never rescanned for slots.
fn fill(name: &str, template: &str, slots: &HashMap<&str, &str>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut last = 0;
    for caps in slot_re().captures_iter(template) {
        let whole = caps.get(0).unwrap();
        let slot = &caps[1];
        let value = slots
            .get(slot)
            .ok_or_else(|| PromptError::UnfilledPlaceholder {
                template: name.to_string(),
                slot: slot.to_string(),
            })?;
        out.push_str(&template[last..whole.start()]);
        out.push_str(value);
        last = whole.end();
    }
    out.push_str(&template[last..]);
    Ok(out)
}

/// Builds the inference prompt for one stage.
///
/// Only toolbox tools and whichever of `reconfigure`/`finish` appear in
/// `schemas` are rendered; other schemas are ignored.
pub fn render_inference_prompt(
    templates: &PromptTemplates,
    task: &str,
    config: &StageConfiguration,
    schemas: &[ToolSchema],
) -> Result<PromptBundle, PromptError> {
    let find = |name: &str| schemas.iter().find(|s| s.name == name);
    let mut rendered = Vec::with_capacity(config.toolbox.len() + 2);
    for name in &config.toolbox {
        let schema = find(name).ok_or_else(|| PromptError::MissingSchema(name.clone()))?;
        rendered.push(schema.to_json_line());
    }
    for name in [RECONFIGURE_TOOL, FINISH_TOOL] {
        if let Some(schema) = find(name) {
            rendered.push(schema.to_json_line());
        }
    }

    let toolbox_list = config.toolbox.join(", ");
    let slots = HashMap::from([
        ("MAIN_TASK_CONTENT", task),
        ("SUB_GOAL_CONTENT", config.sub_goal.as_str()),
        ("EXECUTION_STRATEGY", config.strategy.as_str()),
        ("TOOLBOX_LIST", toolbox_list.as_str()),
        ("KNOWLEDGE_CONTENT", config.knowledge.as_str()),
    ]);
    Ok(PromptBundle {
        system_text: fill("inference_system", &templates.inference_system, &slots)?,
        user_prefix: templates.react_user_prefix.clone(),
        user_suffix: templates.react_user_suffix.clone(),
        tool_block: format!("<tools>\n{}\n</tools>", rendered.join("\n")),
    })
}

/// Renders a request for the engine. `update_content` is left out.
pub fn render_request(request: &ReconfigRequest) -> String {
    serde_json::to_string_pretty(&request.engine_view()).expect("request serializes")
}

fn render_available_tools(pool: &GlobalToolPool) -> String {
    pool.task_tools()
        .map(|s| format!("- {}: {}", s.name, s.description))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_reconfig_prompt(
    templates: &PromptTemplates,
    task: &str,
    pool: &GlobalToolPool,
    history: &GlobalHistoryPool,
    request: Option<&ReconfigRequest>,
) -> Result<PromptBundle, PromptError> {
    let tools = render_available_tools(pool);
    let history_text = if history.is_empty() {
        EMPTY_SLOT.to_string()
    } else {
        serialize_history(history)
    };
    let requirement = request.map_or_else(|| EMPTY_SLOT.to_string(), render_request);
    let slots = HashMap::from([
        ("MAIN_TASK_CONTENT", task),
        ("ALL_AVAILABLE_TOOLS", tools.as_str()),
        ("EXECUTION_HISTORY", history_text.as_str()),
        ("UPDATE_REQUIREMENT", requirement.as_str()),
    ]);
    Ok(PromptBundle {
        system_text: fill("reconfig_system", &templates.reconfig_system, &slots)?,
        user_prefix: ENGINE_USER_INSTRUCTION.to_string(),
        user_suffix: String::new(),
        tool_block: String::new(),
    })
}

/// `Iteration k:` blocks, 1-based, separated by a blank line.
pub fn serialize_history(pool: &GlobalHistoryPool) -> String {
    pool.entries()
        .iter()
        .enumerate()
        .map(|(i, e)| format!("Iteration {}:\nSub-goal: {}\nSummary: {}", i + 1, e.sub_goal, e.summary))
        .collect::<Vec<_>>()
        .join("\n\n")
}
