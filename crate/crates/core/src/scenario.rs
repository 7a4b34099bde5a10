//! Scripted end-to-end runs: a task, both model scripts and the mock
//! environment, bundled as JSON.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::codec::{render_assistant_turn, AssistantTurn, ToolCall};
use crate::config::{GlobalToolPool, UpdateContent, FINISH_TOOL, RECONFIGURE_TOOL};
use crate::llm::{ScriptEntry, ScriptedBackend};
use crate::orchestrator::{AblationMode, ContextBudget, Orchestrator, RunLimits};
use crate::tools::{MockEnvironment, MockScript, ToolRegistry, ToolSession};

const BUILTIN: [(&str, &str); 2] = [
    ("case1_nasa", include_str!("../assets/scenarios/case1_nasa.json")),
    ("case2_asean", include_str!("../assets/scenarios/case2_asean.json")),
];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}`")]
    Unknown(String),
    #[error("scenario does not parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("scenario pool: {0}")]
    Pool(String),
}

/// Agent turn calling a task tool.
pub fn task_turn(thought: &str, tool: &str, arguments: Value) -> String {
    render_assistant_turn(&AssistantTurn {
        thought: thought.to_string(),
        call: ToolCall::new(tool, arguments),
    })
}

/// Agent turn ending the stage with a reconfiguration request.
pub fn reconfigure_turn(thought: &str, summary: &str, new_sub_goal: &str, reason: &str, content: UpdateContent) -> String {
    task_turn(
        thought,
        RECONFIGURE_TOOL,
        json!({
            "execution_summary": summary,
            "update_content": content,
            "update_reason": reason,
            "new_sub_goal": new_sub_goal,
        }),
    )
}

/// Agent turn finishing the task with `result`.
pub fn finish_turn(thought: &str, result: &str, tools_used: &[&str]) -> String {
    task_turn(
        thought,
        FINISH_TOOL,
        json!({
            "task_completion_status": "complete",
            "final_result": result,
            "execution_summary": {
                "detailed_execution": [thought],
                "tools_used": tools_used,
            },
        }),
    )
}

/// Engine reply carrying one configuration.
pub fn engine_reply(sub_goal: &str, strategy: &str, toolbox: &[&str], knowledge: &str) -> String {
    json!({
        "next_sub_goal": sub_goal,
        "execution_strategy": strategy,
        "toolbox": toolbox,
        "inter_agent_knowledge": knowledge,
    })
    .to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub task: String,
    /// Ground truth for the evaluator.
    pub expected_answer: String,
    /// Task tools available; empty means the full default pool.
    #[serde(default)]
    pub tools: Vec<String>,
    pub agent: Vec<ScriptEntry>,
    pub engine: Vec<ScriptEntry>,
    #[serde(default)]
    pub environment: MockScript,
    /// Lets the engine return toolboxes smaller than three tools.
    #[serde(default)]
    pub relax_toolbox_minimum: bool,
}

impl Scenario {
    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN.iter().map(|(n, _)| *n).collect()
    }

    pub fn builtin(name: &str) -> Result<Self, ScenarioError> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ScenarioError::Unknown(name.to_string()))?;
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// A built-in name or a path to a scenario file.
    pub fn resolve(name_or_path: &str) -> Result<Self, ScenarioError> {
        match Self::builtin(name_or_path) {
            Err(ScenarioError::Unknown(_)) if Path::new(name_or_path).is_file() => {
                Self::from_path(Path::new(name_or_path))
            }
            other => other,
        }
    }

    pub fn pool(&self) -> Result<GlobalToolPool, ScenarioError> {
        let pool = GlobalToolPool::default_pool();
        if self.tools.is_empty() {
            return Ok(pool);
        }
        let names: Vec<&str> = self.tools.iter().map(String::as_str).collect();
        pool.restricted_to(&names).map_err(|e| ScenarioError::Pool(e.to_string()))
    }

    pub fn agent_backend(&self) -> Arc<ScriptedBackend> {
        Arc::new(ScriptedBackend::new(format!("{}/agent", self.name), self.agent.clone()))
    }

    pub fn engine_backend(&self) -> Arc<ScriptedBackend> {
        Arc::new(ScriptedBackend::new(format!("{}/engine", self.name), self.engine.clone()))
    }

    pub fn session(&self) -> ToolSession {
        ToolSession::mock(MockEnvironment::new(self.environment.clone()))
    }

    /// Orchestrator wired to fresh scripted backends and mock tools. Prompt
    /// expectations in the scripts are only checked in full mode.
    pub fn orchestrator(&self, mode: AblationMode, limits: RunLimits, budget: ContextBudget) -> Result<Orchestrator, ScenarioError> {
        let pool = self.pool()?;
        let registry = ToolRegistry::mock(&pool);
        let checked = mode == AblationMode::full();
        let agent = ScriptedBackend::new(format!("{}/agent", self.name), self.agent.clone()).with_assertions(checked);
        let engine = ScriptedBackend::new(format!("{}/engine", self.name), self.engine.clone()).with_assertions(checked);
        Ok(Orchestrator::new(Arc::new(agent), Arc::new(engine), pool, registry)
            .with_mode(mode)
            .with_limits(limits)
            .with_budget(budget)
            .with_toolbox_minimum(!self.relax_toolbox_minimum)
            .with_scenario(self.name.clone()))
    }

    /// Exact match after trimming and case folding.
    pub fn judge(&self, answer: Option<&str>) -> bool {
        answer.is_some_and(|a| a.trim().eq_ignore_ascii_case(self.expected_answer.trim()))
    }
}
