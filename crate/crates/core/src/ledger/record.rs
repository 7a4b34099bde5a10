use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::kto::LogprobBundle;
use crate::config::{ExecutionSummary, GlobalHistoryPool, ReconfigRequest, StageConfiguration};
use crate::engine::EngineCall;
use crate::llm::{ChatMessage, SamplingParams};
use crate::orchestrator::{AblationMode, ContextBudget, RunLimits};
use crate::tools::Step;

/// Current on-disk schema.
pub const LEDGER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionStatus {
    Complete,
    Partial,
    Incomplete,
}

/// Validated `finish` arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinishPayload {
    pub task_completion_status: CompletionStatus,
    pub final_result: String,
    pub execution_summary: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Reconfigured,
    Finished,
    LimitExceeded,
    Aborted,
}

/// How a stage ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub kind: OutcomeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<ExecutionSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<ReconfigRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_payload: Option<FinishPayload>,
    /// The assistant text of the terminal call, when the model made one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    /// Set when the runtime, not the model, ended the stage.
    #[serde(default)]
    pub forced: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl StageOutcome {
    pub fn reconfigured(summary: ExecutionSummary, request: ReconfigRequest, raw: Option<String>) -> Self {
        Self {
            kind: OutcomeKind::Reconfigured,
            summary: Some(summary),
            request: Some(request),
            final_payload: None,
            forced: raw.is_none(),
            raw,
            reason: None,
        }
    }

    pub fn finished(payload: FinishPayload, raw: String) -> Self {
        Self {
            kind: OutcomeKind::Finished,
            summary: None,
            request: None,
            final_payload: Some(payload),
            raw: Some(raw),
            forced: false,
            reason: None,
        }
    }

    pub fn stopped(kind: OutcomeKind, reason: impl Into<String>) -> Self {
        Self {
            kind,
            summary: None,
            request: None,
            final_payload: None,
            raw: None,
            forced: true,
            reason: Some(reason.into()),
        }
    }
}

/// The inference agent's record for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    /// System and user turns built from (task, configuration).
    pub prompt: Vec<ChatMessage>,
    pub steps: Vec<Step>,
    pub terminal: StageOutcome,
    /// Summed token log-probabilities of every agent completion in the stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config: StageConfiguration,
    pub engine: EngineCall,
    pub trace: StageTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Finished,
    ReconfigLimitExceeded,
    IterationLimitExceeded,
    Aborted,
    EngineFailure,
    BackendFailure,
}

impl RunStatus {
    pub fn is_failure(self) -> bool {
        self != RunStatus::Finished
    }
}

/// Evaluator verdict. The runtime never sets this.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
    #[default]
    Unlabeled,
}

impl Outcome {
    pub fn from_label(y: bool) -> Self {
        if y {
            Outcome::Success
        } else {
            Outcome::Failure
        }
    }

    pub fn label(self) -> Option<bool> {
        match self {
            Outcome::Success => Some(true),
            Outcome::Failure => Some(false),
            Outcome::Unlabeled => None,
        }
    }
}

/// One agent prompt as submitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEvent {
    pub stage_index: usize,
    pub prompt_tokens: usize,
    /// Size before the context policy ran.
    pub raw_tokens: usize,
    pub cleanup: bool,
    /// Steps left in the prompt after the policy ran.
    #[serde(default)]
    pub window_steps: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub completions: usize,
    pub steps: usize,
    pub reconfigs: usize,
    pub parse_failures: usize,
    pub cleanups: usize,
    pub max_prompt_tokens: usize,
    pub total_prompt_tokens: usize,
    pub total_output_tokens: usize,
    pub engine_calls: usize,
    pub engine_prompt_tokens: usize,
    /// Engine calls that took the proposed sub-goal verbatim, out of those
    /// that had one.
    pub adopted: usize,
    pub adoption_eligible: usize,
}

impl RunMetrics {
    pub fn adoption_rate(&self) -> Option<f64> {
        (self.adoption_eligible > 0).then(|| self.adopted as f64 / self.adoption_eligible as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub agent_params: SamplingParams,
    pub engine_params: SamplingParams,
    pub mode: AblationMode,
    pub limits: RunLimits,
    pub budget: ContextBudget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    pub started_ms: u64,
    pub finished_ms: u64,
}

/// A complete run: every configuration and stage trace, plus the verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub version: u32,
    pub id: String,
    pub task: String,
    pub stages: Vec<StageRecord>,
    pub status: RunStatus,
    #[serde(default)]
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_result: Option<String>,
    /// Why a failed run stopped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub history: GlobalHistoryPool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob_bundle: Option<LogprobBundle<f64>>,
    pub metrics: RunMetrics,
    #[serde(default)]
    pub prompt_events: Vec<PromptEvent>,
    pub metadata: RunMetadata,
}

impl Trajectory {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn steps(&self) -> impl Iterator<Item = &Step> {
        self.stages.iter().flat_map(|s| s.trace.steps.iter())
    }

    pub fn with_outcome(mut self, outcome: Outcome) -> Self {
        self.outcome = outcome;
        self
    }

    pub fn labeled(self, y: bool) -> Self {
        self.with_outcome(Outcome::from_label(y))
    }

    /// Copy with wall-clock fields and model ids blanked, for comparisons.
    pub fn normalized(&self) -> Self {
        let mut t = self.clone();
        t.metadata.started_ms = 0;
        t.metadata.finished_ms = 0;
        t.metadata.agent_params.model_id.clear();
        t.metadata.engine_params.model_id.clear();
        for stage in &mut t.stages {
            for step in &mut stage.trace.steps {
                step.observation.latency_ms = 0;
            }
        }
        t
    }

    /// Builds the log-probability bundle when every component has one.
    pub fn collect_logprobs(&self) -> Option<LogprobBundle<f64>> {
        let (first, rest) = self.stages.split_first()?;
        Some(LogprobBundle {
            initial_config: first.engine.logprob?,
            stage_traces: self
                .stages
                .iter()
                .map(|s| s.trace.logprob)
                .collect::<Option<Vec<_>>>()?,
            reconfigs: rest
                .iter()
                .map(|s| s.engine.logprob)
                .collect::<Option<Vec<_>>>()?,
        })
    }
}
