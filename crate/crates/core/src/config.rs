//! Stage configuration, reconfiguration requests, and the two global pools.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::codec::{default_schemas, ToolSchema};
use crate::prompt::serialize_history;

pub const RECONFIGURE_TOOL: &str = "reconfigure";
pub const FINISH_TOOL: &str = "finish";

/// Knowledge directive that expands to the whole history pool.
pub const ALL_HISTORY: &str = "ALL";

/// Minimum toolbox size asked of the reconfiguration engine.
pub const MIN_ENGINE_TOOLBOX: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("`{0}` is a management tool and cannot be part of a toolbox")]
    ReservedTool(String),
    #[error("toolbox has {got} tools; at least {need} are required")]
    TooFewTools { got: usize, need: usize },
    #[error("tool pool is empty")]
    EmptyPool,
    #[error("reconfiguration request field `{0}` is empty")]
    EmptyRequestField(&'static str),
    #[error("execution summary is empty")]
    EmptySummary,
    #[error("history entry has stage index {got}, expected {expected}")]
    HistoryGap { expected: usize, got: usize },
    #[error("invalid reconfigure arguments: {0}")]
    BadArguments(String),
}

/// The per-stage tuple: sub-goal, strategy, toolbox, knowledge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfiguration {
    pub stage_index: usize,
    pub sub_goal: String,
    pub strategy: String,
    pub toolbox: Vec<String>,
    pub knowledge: String,
}

/// What the agent said it wanted to change. Metadata only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateContent {
    SubGoal,
    Toolbox,
    Knowledge,
    ExecutionStrategy,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestDetails {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toolbox_requirements: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_requirements: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution_strategy_requirements: Option<String>,
}

impl RequestDetails {
    pub fn is_empty(&self) -> bool {
        self.toolbox_requirements.is_none()
            && self.knowledge_requirements.is_none()
            && self.execution_strategy_requirements.is_none()
    }
}

/// The agent-authored request handed to the reconfiguration engine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconfigRequest {
    #[serde(rename = "new_sub_goal")]
    pub proposed_sub_goal: String,
    pub update_reason: String,
    /// Recorded for analysis; never forwarded to the engine.
    pub update_content: UpdateContent,
    #[serde(
        rename = "additional_details",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub details: Option<RequestDetails>,
}

impl ReconfigRequest {
    pub fn new(
        proposed_sub_goal: impl Into<String>,
        update_reason: impl Into<String>,
        update_content: UpdateContent,
    ) -> Result<Self, ConfigError> {
        let req = Self {
            proposed_sub_goal: proposed_sub_goal.into(),
            update_reason: update_reason.into(),
            update_content,
            details: None,
        };
        req.check()?;
        Ok(req)
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        if self.proposed_sub_goal.trim().is_empty() {
            return Err(ConfigError::EmptyRequestField("new_sub_goal"));
        }
        if self.update_reason.trim().is_empty() {
            return Err(ConfigError::EmptyRequestField("update_reason"));
        }
        Ok(())
    }

    /// Splits validated `reconfigure` arguments into the stage summary and
    /// the request.
    pub fn from_reconfigure_arguments(args: &Value) -> Result<(String, Self), ConfigError> {
        let summary = args
            .get("execution_summary")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let mut req: ReconfigRequest = serde_json::from_value(args.clone())
            .map_err(|e| ConfigError::BadArguments(e.to_string()))?;
        if req.details.as_ref().is_some_and(RequestDetails::is_empty) {
            req.details = None;
        }
        req.check()?;
        if summary.trim().is_empty() {
            return Err(ConfigError::EmptySummary);
        }
        Ok((summary, req))
    }

    /// The portion the engine is allowed to see: everything except
    /// `update_content`.
    pub fn engine_view(&self) -> Value {
        let mut map = serde_json::Map::new();
        map.insert("new_sub_goal".into(), Value::String(self.proposed_sub_goal.clone()));
        map.insert("update_reason".into(), Value::String(self.update_reason.clone()));
        if let Some(details) = self.details.as_ref().filter(|d| !d.is_empty()) {
            map.insert(
                "additional_details".into(),
                serde_json::to_value(details).expect("details serialize"),
            );
        }
        Value::Object(map)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionSummary {
    pub stage_index: usize,
    pub sub_goal: String,
    pub summary: String,
}

impl ExecutionSummary {
    pub fn new(
        stage_index: usize,
        sub_goal: impl Into<String>,
        summary: impl Into<String>,
    ) -> Result<Self, ConfigError> {
        let summary = summary.into();
        if summary.trim().is_empty() {
            return Err(ConfigError::EmptySummary);
        }
        Ok(Self {
            stage_index,
            sub_goal: sub_goal.into(),
            summary,
        })
    }
}

/// Append-only record of per-stage summaries.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GlobalHistoryPool {
    entries: Vec<ExecutionSummary>,
}

impl GlobalHistoryPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<ExecutionSummary>) -> Result<Self, ConfigError> {
        let mut pool = Self::new();
        for e in entries {
            pool.push(e)?;
        }
        Ok(pool)
    }

    /// Entries must arrive in stage order without gaps.
    pub fn push(&mut self, entry: ExecutionSummary) -> Result<(), ConfigError> {
        let expected = self.entries.len();
        if entry.stage_index != expected {
            return Err(ConfigError::HistoryGap {
                expected,
                got: entry.stage_index,
            });
        }
        if entry.summary.trim().is_empty() {
            return Err(ConfigError::EmptySummary);
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[ExecutionSummary] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Every task tool an agent may be given, plus the two management tools.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalToolPool {
    tools: IndexMap<String, ToolSchema>,
    reconfigure: ToolSchema,
    finish: ToolSchema,
}

impl GlobalToolPool {
    /// Builds a pool from a schema list that contains `reconfigure` and
    /// `finish` alongside the task tools.
    pub fn from_schemas(schemas: Vec<ToolSchema>) -> Result<Self, ConfigError> {
        let mut tools = IndexMap::new();
        let mut reconfigure = None;
        let mut finish = None;
        for s in schemas {
            match s.name.as_str() {
                RECONFIGURE_TOOL => reconfigure = Some(s),
                FINISH_TOOL => finish = Some(s),
                _ => {
                    tools.insert(s.name.clone(), s);
                }
            }
        }
        Ok(Self {
            tools,
            reconfigure: reconfigure.ok_or(ConfigError::UnknownTool(RECONFIGURE_TOOL.into()))?,
            finish: finish.ok_or(ConfigError::UnknownTool(FINISH_TOOL.into()))?,
        })
    }

    /// The six task tools: visit, search, code_interpreter, execute_bash,
    /// str_replace_editor, file_analyzer.
    pub fn default_pool() -> Self {
        Self::from_schemas(default_schemas()).expect("bundled schemas include management tools")
    }

    /// Keeps only the named task tools.
    pub fn restricted_to(&self, names: &[&str]) -> Result<Self, ConfigError> {
        let mut tools = IndexMap::new();
        for name in names {
            let schema = self
                .tools
                .get(*name)
                .ok_or_else(|| ConfigError::UnknownTool(name.to_string()))?;
            tools.insert(name.to_string(), schema.clone());
        }
        Ok(Self {
            tools,
            reconfigure: self.reconfigure.clone(),
            finish: self.finish.clone(),
        })
    }

    pub fn task_tool_names(&self) -> Vec<String> {
        self.tools.keys().cloned().collect()
    }

    pub fn task_tools(&self) -> impl Iterator<Item = &ToolSchema> {
        self.tools.values()
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    /// Looks up any tool, including the management tools.
    pub fn schema(&self, name: &str) -> Option<&ToolSchema> {
        match name {
            RECONFIGURE_TOOL => Some(&self.reconfigure),
            FINISH_TOOL => Some(&self.finish),
            _ => self.tools.get(name),
        }
    }

    pub fn reconfigure_schema(&self) -> &ToolSchema {
        &self.reconfigure
    }

    pub fn finish_schema(&self) -> &ToolSchema {
        &self.finish
    }
}

pub fn is_reserved(name: &str) -> bool {
    name == RECONFIGURE_TOOL || name == FINISH_TOOL
}

/// Checks a proposed toolbox against the pool, dropping duplicates while
/// keeping first-seen order.
pub fn validate_toolbox<S: AsRef<str>>(
    proposed: &[S],
    pool: &GlobalToolPool,
    enforce_min: bool,
) -> Result<Vec<String>, ConfigError> {
    if pool.is_empty() {
        return Err(ConfigError::EmptyPool);
    }
    let mut out: Vec<String> = Vec::with_capacity(proposed.len());
    for name in proposed.iter().map(AsRef::as_ref) {
        if is_reserved(name) {
            return Err(ConfigError::ReservedTool(name.to_string()));
        }
        if !pool.contains(name) {
            return Err(ConfigError::UnknownTool(name.to_string()));
        }
        if !out.iter().any(|t| t == name) {
            out.push(name.to_string());
        }
    }
    if enforce_min {
        let need = MIN_ENGINE_TOOLBOX.min(pool.len());
        if out.len() < need {
            return Err(ConfigError::TooFewTools {
                got: out.len(),
                need,
            });
        }
    }
    Ok(out)
}

/// `""` stays empty, `"ALL"` expands to the serialized pool, anything else
/// is already a summary and is returned as is.
pub fn resolve_knowledge(directive: &str, pool: &GlobalHistoryPool) -> String {
    match directive {
        "" => String::new(),
        ALL_HISTORY => serialize_history(pool),
        other => other.to_string(),
    }
}
