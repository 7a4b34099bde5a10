//! Task tools behind one dispatch interface.

mod adapters;
pub mod editor;
mod live;
mod mock;
pub mod sandbox;
mod truncate;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{render_assistant_turn, render_tool_response, validate_call, AssistantTurn, ToolCall, ToolSchema};
use crate::config::GlobalToolPool;
use crate::llm::{ChatBackend, ChatMessage, SamplingParams};

pub use adapters::{BashTool, EditorTool, MockTool, PythonTool};
pub use editor::EditorState;
pub use live::{FileAnalyzerTool, LiveToolConfig, SearchTool, VisitTool};
pub use mock::{MockEnvironment, MockRule, MockScript};
pub use sandbox::{ExecOutput, Sandbox, SubprocessSandbox};
pub use truncate::{
    compress_body, compress_old_observations, has_truncation_marker, truncate_message,
    OLD_OUTPUT_PREFIX,
};

/// Default per-call timeout, matching the shell tool's documented default.
pub const DEFAULT_TOOL_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ToolError {
    #[error("tool `{0}` is not registered")]
    ToolNotRegistered(String),
    #[error("tool `{tool}` timed out after {secs} s")]
    ToolTimeout { tool: String, secs: f64 },
    #[error("tool `{tool}` failed: {detail}")]
    ToolFailure { tool: String, detail: String },
}

impl ToolError {
    pub fn failure(tool: &str, detail: impl Into<String>) -> Self {
        ToolError::ToolFailure {
            tool: tool.to_string(),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub body: String,
    #[serde(default)]
    pub truncated: bool,
    pub source_tool: String,
    #[serde(default)]
    pub latency_ms: u64,
}

impl Observation {
    pub fn new(tool: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            body: body.into(),
            truncated: false,
            source_tool: tool.into(),
            latency_ms: 0,
        }
    }

    pub fn from_error(tool: impl Into<String>, err: &ToolError) -> Self {
        Self::new(tool, format!("Error: {err}"))
    }

    /// Applies `truncate_message` in place.
    pub fn truncate(&mut self, char_cap: usize) {
        let cut = truncate_message(&self.body, char_cap);
        if cut.len() != self.body.len() {
            self.body = cut;
            self.truncated = true;
        }
    }
}

/// One think/act/observe cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub thought: String,
    pub call: ToolCall,
    pub observation: Observation,
    /// The completion text exactly as the model emitted it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

impl Step {
    pub fn assistant_text(&self) -> String {
        match &self.raw {
            Some(raw) => raw.clone(),
            None => render_assistant_turn(&AssistantTurn {
                thought: self.thought.clone(),
                call: self.call.clone(),
            }),
        }
    }

    pub fn response_text(&self) -> String {
        render_tool_response(&self.observation.body)
    }

    /// The assistant turn followed by the tool response as a user turn.
    pub fn messages(&self) -> [ChatMessage; 2] {
        [
            ChatMessage::assistant(self.assistant_text()),
            ChatMessage::user(self.response_text()),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Mock,
    Live,
}

/// A tool implementation. `execute` only sees calls that passed schema
/// validation.
pub trait ToolAdapter: Send + Sync {
    fn kind(&self) -> AdapterKind;
    fn execute(&self, call: &ToolCall, session: &mut ToolSession) -> Result<String, ToolError>;
}

/// Per-run mutable tool state. Never shared between runs.
#[derive(Debug, Clone)]
pub struct ToolSession {
    pub workspace: PathBuf,
    pub mock: Option<MockEnvironment>,
    pub editor: EditorState,
    pub default_timeout: Duration,
}

impl ToolSession {
    pub fn mock(env: MockEnvironment) -> Self {
        Self {
            workspace: std::env::temp_dir(),
            mock: Some(env),
            editor: EditorState::new(),
            default_timeout: DEFAULT_TOOL_TIMEOUT,
        }
    }

    pub fn live(workspace: impl Into<PathBuf>) -> Self {
        Self {
            workspace: workspace.into(),
            mock: None,
            editor: EditorState::new(),
            default_timeout: DEFAULT_TOOL_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.default_timeout = timeout;
        self
    }
}

#[derive(Clone)]
struct Registered {
    schema: ToolSchema,
    adapter: Arc<dyn ToolAdapter>,
}

/// Maps tool names to schemas and adapters. Read-only once built.
#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: IndexMap<String, Registered>,
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.tools.keys()).finish()
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, schema: ToolSchema, adapter: Arc<dyn ToolAdapter>) {
        self.tools.insert(schema.name.clone(), Registered { schema, adapter });
    }

    /// Every task tool of `pool`, answered from the session's mock script.
    pub fn mock(pool: &GlobalToolPool) -> Self {
        let mut reg = Self::new();
        for schema in pool.task_tools() {
            reg.register(schema.clone(), Arc::new(MockTool));
        }
        reg
    }

    /// Live adapters for the pool's tools. Tools whose service is not
    /// configured stay unregistered.
    pub fn live(
        pool: &GlobalToolPool,
        cfg: &LiveToolConfig,
        backend: Option<Arc<dyn ChatBackend>>,
        params: SamplingParams,
    ) -> Result<Self, ToolError> {
        let mut reg = Self::new();
        let sandbox: Arc<dyn Sandbox> = Arc::new(SubprocessSandbox);
        for schema in pool.task_tools() {
            let adapter: Option<Arc<dyn ToolAdapter>> = match schema.name.as_str() {
                "execute_bash" => Some(Arc::new(BashTool::new(Arc::clone(&sandbox)))),
                "code_interpreter" => Some(Arc::new(PythonTool::new(
                    Arc::clone(&sandbox),
                    cfg.python.clone(),
                ))),
                "str_replace_editor" => Some(Arc::new(EditorTool)),
                "search" => match &cfg.search_url {
                    Some(url) => Some(Arc::new(SearchTool::new(url, cfg.max_results)?)),
                    None => None,
                },
                "visit" => match (&cfg.reader_url, &backend) {
                    (Some(url), Some(b)) => Some(Arc::new(VisitTool::new(
                        url,
                        Arc::clone(b),
                        params.clone(),
                        cfg.extract_chars,
                    )?)),
                    _ => None,
                },
                "file_analyzer" => backend.as_ref().map(|b| {
                    Arc::new(FileAnalyzerTool::new(Arc::clone(b), params.clone(), cfg.extract_chars))
                        as Arc<dyn ToolAdapter>
                }),
                _ => None,
            };
            match adapter {
                Some(a) => reg.register(schema.clone(), a),
                None => log::warn!("tool `{}` has no live service configured", schema.name),
            }
        }
        Ok(reg)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    pub fn schema(&self, name: &str) -> Option<&ToolSchema> {
        self.tools.get(name).map(|r| &r.schema)
    }

    pub fn kind(&self, name: &str) -> Option<AdapterKind> {
        self.tools.get(name).map(|r| r.adapter.kind())
    }

    /// Runs `call`. Failures of any kind come back as error-text observations.
    pub fn dispatch(&self, call: &ToolCall, session: &mut ToolSession) -> Observation {
        let Some(entry) = self.tools.get(&call.name) else {
            return Observation::from_error(&call.name, &ToolError::ToolNotRegistered(call.name.clone()));
        };
        if let Err(e) = validate_call(call, &entry.schema) {
            return Observation::from_error(&call.name, &ToolError::failure(&call.name, e.to_string()));
        }
        let started = Instant::now();
        let result = entry.adapter.execute(call, session);
        let latency_ms = match entry.adapter.kind() {
            AdapterKind::Mock => 0,
            AdapterKind::Live => started.elapsed().as_millis() as u64,
        };
        let mut obs = match result {
            Ok(body) => Observation::new(&call.name, body),
            Err(e) => Observation::from_error(&call.name, &e),
        };
        obs.latency_ms = latency_ms;
        obs
    }
}

/// Runs `f` over `items` concurrently and returns results in input order.
pub(crate) fn fan_out<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = items.iter().map(|item| s.spawn(|| f(item))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("tool worker panicked"))
            .collect()
    })
}
