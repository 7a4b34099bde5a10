use std::sync::Arc;
use std::time::Duration;

use serde_json::Value;

use super::sandbox::{check_command, Sandbox};
use super::{AdapterKind, ToolAdapter, ToolError, ToolSession};
use crate::codec::ToolCall;

/// Answers from the session's `MockEnvironment`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockTool;

impl ToolAdapter for MockTool {
    fn kind(&self) -> AdapterKind {
        AdapterKind::Mock
    }

    fn execute(&self, call: &ToolCall, session: &mut ToolSession) -> Result<String, ToolError> {
        session
            .mock
            .as_mut()
            .map(|env| env.respond(call))
            .ok_or_else(|| ToolError::failure(&call.name, "no mock environment in this session"))
    }
}

/// `bash -c` in the sandbox.
pub struct BashTool {
    sandbox: Arc<dyn Sandbox>,
}

impl BashTool {
    pub fn new(sandbox: Arc<dyn Sandbox>) -> Self {
        Self { sandbox }
    }
}

impl ToolAdapter for BashTool {
    fn kind(&self) -> AdapterKind {
        AdapterKind::Live
    }

    fn execute(&self, call: &ToolCall, session: &mut ToolSession) -> Result<String, ToolError> {
        let command = call.arg_str("command").unwrap_or_default();
        check_command(command).map_err(|e| ToolError::failure(&call.name, e))?;
        let timeout = call
            .arguments
            .get("timeout")
            .and_then(Value::as_u64)
            .filter(|&s| s > 0)
            .map(Duration::from_secs)
            .unwrap_or(session.default_timeout);
        let cwd = call
            .arg_str("cwd")
            .map(|c| session.workspace.join(c))
            .unwrap_or_else(|| session.workspace.clone());
        self.sandbox
            .run("bash", &["-c", command], None, &cwd, timeout)
            .map(|out| out.render())
            .map_err(|e| rename(e, &call.name))
    }
}

/// Runs each snippet in a fresh interpreter.
pub struct PythonTool {
    sandbox: Arc<dyn Sandbox>,
    python: String,
}

impl PythonTool {
    pub fn new(sandbox: Arc<dyn Sandbox>, python: impl Into<String>) -> Self {
        Self {
            sandbox,
            python: python.into(),
        }
    }
}

impl ToolAdapter for PythonTool {
    fn kind(&self) -> AdapterKind {
        AdapterKind::Live
    }

    fn execute(&self, call: &ToolCall, session: &mut ToolSession) -> Result<String, ToolError> {
        let code = call.arg_str("code").unwrap_or_default();
        self.sandbox
            .run(
                &self.python,
                &["-"],
                Some(code),
                &session.workspace,
                session.default_timeout,
            )
            .map(|out| out.render())
            .map_err(|e| rename(e, &call.name))
    }
}

/// `str_replace_editor` over the session workspace.
#[derive(Debug, Clone, Copy, Default)]
pub struct EditorTool;

impl ToolAdapter for EditorTool {
    fn kind(&self) -> AdapterKind {
        AdapterKind::Live
    }

    fn execute(&self, call: &ToolCall, session: &mut ToolSession) -> Result<String, ToolError> {
        let workspace = session.workspace.clone();
        session
            .editor
            .execute(&workspace, &call.arguments)
            .map_err(|e| ToolError::failure(&call.name, e))
    }
}

// Sandbox errors name the program; report the tool instead.
fn rename(err: ToolError, tool: &str) -> ToolError {
    match err {
        ToolError::ToolTimeout { secs, .. } => ToolError::ToolTimeout {
            tool: tool.to_string(),
            secs,
        },
        ToolError::ToolFailure { detail, .. } => ToolError::failure(tool, detail),
        other => other,
    }
}
