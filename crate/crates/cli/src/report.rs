//! Text renderings of trajectories and run metrics.

use std::fmt::Write;

use serde::Serialize;
use stagewise::ledger::{OutcomeKind, StageRecord};
use stagewise::{Outcome, RunStatus, Trajectory};

pub fn status_name(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Finished => "finished",
        RunStatus::ReconfigLimitExceeded => "reconfig_limit_exceeded",
        RunStatus::IterationLimitExceeded => "iteration_limit_exceeded",
        RunStatus::Aborted => "aborted",
        RunStatus::EngineFailure => "engine_failure",
        RunStatus::BackendFailure => "backend_failure",
    }
}

fn outcome_name(o: Outcome) -> &'static str {
    match o {
        Outcome::Success => "true",
        Outcome::Failure => "false",
        Outcome::Unlabeled => "-",
    }
}

/// One row of run metrics, shared by `run`, `replay` and `ablate`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub mode: String,
    pub status: &'static str,
    pub success: Option<bool>,
    pub stages: usize,
    pub steps: usize,
    pub reconfigs: usize,
    pub max_prompt_tokens: usize,
    pub total_tokens: usize,
}

impl MetricsRow {
    pub fn of(t: &Trajectory) -> Self {
        let m = &t.metrics;
        Self {
            scenario: t.metadata.scenario.clone().unwrap_or_default(),
            mode: t.metadata.mode.name(),
            status: status_name(t.status),
            success: t.outcome.label(),
            stages: t.stage_count(),
            steps: m.steps,
            reconfigs: m.reconfigs,
            max_prompt_tokens: m.max_prompt_tokens,
            total_tokens: m.total_prompt_tokens + m.total_output_tokens,
        }
    }
}

pub fn summary_line(t: &Trajectory) -> String {
    let r = MetricsRow::of(t);
    format!(
        "status={} success={} stages={} steps={} reconfigs={} max_prompt_tokens={} total_tokens={}",
        r.status,
        outcome_name(t.outcome),
        r.stages,
        r.steps,
        r.reconfigs,
        r.max_prompt_tokens,
        r.total_tokens
    )
}

fn toolbox_view(prev: Option<&StageRecord>, stage: &StageRecord) -> String {
    let now = &stage.config.toolbox;
    let list = now.join(", ");
    let Some(prev) = prev else { return list };
    let before = &prev.config.toolbox;
    let added: Vec<String> = now.iter().filter(|t| !before.contains(t)).map(|t| format!("+{t}")).collect();
    let removed: Vec<String> = before.iter().filter(|t| !now.contains(t)).map(|t| format!("-{t}")).collect();
    if added.is_empty() && removed.is_empty() {
        format!("{list}  (maintained)")
    } else {
        format!("{list}  ({})", added.into_iter().chain(removed).collect::<Vec<_>>().join(" "))
    }
}

fn knowledge_view(stage: &StageRecord) -> String {
    let k = &stage.config.knowledge;
    if k.is_empty() {
        "empty".into()
    } else if stage.engine.output.inter_agent_knowledge == "ALL" {
        format!("ALL ({} lines)", k.lines().count())
    } else {
        k.clone()
    }
}

fn decision(stage: &StageRecord) -> String {
    let t = &stage.trace.terminal;
    match t.kind {
        OutcomeKind::Reconfigured if t.forced => "reconfigure (forced)".into(),
        OutcomeKind::Reconfigured => "reconfigure".into(),
        OutcomeKind::Finished => "finish".into(),
        OutcomeKind::LimitExceeded => "limit exceeded".into(),
        OutcomeKind::Aborted => format!("aborted: {}", t.reason.as_deref().unwrap_or("")),
    }
}

/// Stage-by-stage configuration view.
pub fn inspect(t: &Trajectory) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "trajectory {} [{}] success={}", t.id, status_name(t.status), outcome_name(t.outcome));
    let _ = writeln!(out, "mode: {}", t.metadata.mode.name());
    let _ = writeln!(out, "task: {}", t.task);
    if let Some(f) = &t.final_result {
        let _ = writeln!(out, "final: {f}");
    }
    if let Some(r) = &t.reason {
        let _ = writeln!(out, "reason: {r}");
    }
    for (i, stage) in t.stages.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| &t.stages[j]);
        let _ = writeln!(out, "\nStage {}", stage.config.stage_index + 1);
        let _ = writeln!(out, "  sub_goal:  {}", stage.config.sub_goal);
        let _ = writeln!(out, "  strategy:  {}", stage.config.strategy);
        let _ = writeln!(out, "  toolbox:   {}", toolbox_view(prev, stage));
        let _ = writeln!(out, "  knowledge: {}", knowledge_view(stage));
        let calls: Vec<&str> = stage.trace.steps.iter().map(|s| s.call.name.as_str()).collect();
        let _ = writeln!(out, "  steps:     {} [{}]", calls.len(), calls.join(", "));
        let _ = writeln!(out, "  decision:  {}", decision(stage));
    }
    let _ = writeln!(out, "\n{}", summary_line(t));
    out
}
