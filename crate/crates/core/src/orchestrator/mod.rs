//! The inference / reconfiguration loop.

mod policy;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{parse_assistant_turn, validate_call, ToolCall, ToolSchema};
use crate::config::{
    ExecutionSummary, GlobalHistoryPool, GlobalToolPool, ReconfigRequest, StageConfiguration,
    UpdateContent, FINISH_TOOL, RECONFIGURE_TOOL,
};
use crate::engine::{EngineCall, EngineError, EngineOutput, ReconfigEngine};
use crate::ledger::{
    FinishPayload, Outcome, OutcomeKind, PromptEvent, RunMetadata, RunMetrics, RunStatus,
    StageOutcome, StageRecord, StageTrace, Trajectory, LEDGER_VERSION,
};
use crate::llm::{prompt_tokens, ApproxCounter, ChatBackend, ChatMessage, SamplingParams, TokenCounter};
use crate::prompt::{render_inference_prompt, PromptTemplates};
use crate::tools::{Observation, Step, ToolError, ToolRegistry, ToolSession};

pub use policy::{apply_context_policy, steps_tokens, ContextBudget, PolicyResult};

/// Steps per stage for the fixed-interval modes when none is given.
pub const DEFAULT_INTERVAL: usize = 5;

/// Consecutive malformed completions tolerated before a run is aborted.
pub const MAX_PARSE_FAILURES: usize = 3;

/// Strategy text used when the strategy field is pinned.
pub const GENERIC_STRATEGY: &str = "Work through the task one step at a time: decide what \
information is still missing, pick the most suitable tool from the toolbox, check each tool \
response carefully, and call finish once the main task is answered.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunLimits {
    /// Agent completions across the whole run.
    pub max_iterations: usize,
    pub max_reconfigs: usize,
    pub per_step_timeout_secs: u64,
}

impl Default for RunLimits {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            max_reconfigs: 30,
            per_step_timeout_secs: 120,
        }
    }
}

impl RunLimits {
    pub fn per_step_timeout(&self) -> Duration {
        Duration::from_secs(self.per_step_timeout_secs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    SubGoal,
    Strategy,
    Toolbox,
    Context,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::SubGoal,
        Component::Strategy,
        Component::Toolbox,
        Component::Context,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::SubGoal => "sub_goal",
            Component::Strategy => "strategy",
            Component::Toolbox => "toolbox",
            Component::Context => "context",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

/// Which parts of the agent's self-management are switched off.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationMode {
    /// Reconfigure after every `n` task-tool steps instead of on request.
    pub fixed_interval_when: Option<usize>,
    /// Hide the agent's request from the engine.
    pub drop_request_how: bool,
    /// Fields pinned after every engine call.
    pub disable: BTreeSet<Component>,
    /// Do not offer the reconfigure tool at all.
    pub no_reconfigure_tool: bool,
}

impl AblationMode {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn without_when(interval: usize) -> Self {
        Self { fixed_interval_when: Some(interval), ..Self::default() }
    }

    pub fn without_how() -> Self {
        Self { drop_request_how: true, ..Self::default() }
    }

    pub fn without_both(interval: usize) -> Self {
        Self {
            fixed_interval_when: Some(interval),
            drop_request_how: true,
            ..Self::default()
        }
    }

    pub fn disabling(components: impl IntoIterator<Item = Component>) -> Self {
        Self { disable: components.into_iter().collect(), ..Self::default() }
    }

    /// Every field pinned and no reconfigure tool: a plain single-loop agent.
    pub fn static_baseline() -> Self {
        Self {
            disable: Component::ALL.into_iter().collect(),
            no_reconfigure_tool: true,
            ..Self::default()
        }
    }

    pub fn reconfigure_offered(&self) -> bool {
        !self.no_reconfigure_tool && self.fixed_interval_when.is_none()
    }

    /// Inverse of [`AblationMode::name`]. A bare `w/o-when` or `w/o-both`
    /// uses [`DEFAULT_INTERVAL`].
    pub fn from_name(name: &str) -> Result<Self, String> {
        let name = name.trim();
        if name == "static" {
            return Ok(Self::static_baseline());
        }
        let mut mode = Self::default();
        for part in name.split(',').map(str::trim) {
            let (head, interval) = match part.split_once('@') {
                Some((h, n)) => {
                    let n: usize = n.parse().map_err(|_| format!("bad interval in `{part}`"))?;
                    if n == 0 {
                        return Err(format!("interval in `{part}` must be positive"));
                    }
                    (h, Some(n))
                }
                None => (part, None),
            };
            match head {
                "full" if interval.is_none() => {}
                "no-reconfigure" if interval.is_none() => mode.no_reconfigure_tool = true,
                "w/o-when" => mode.fixed_interval_when = Some(interval.unwrap_or(DEFAULT_INTERVAL)),
                "w/o-how" if interval.is_none() => mode.drop_request_how = true,
                "w/o-both" => {
                    mode.fixed_interval_when = Some(interval.unwrap_or(DEFAULT_INTERVAL));
                    mode.drop_request_how = true;
                }
                other => {
                    let list = other
                        .strip_prefix("w/o-")
                        .filter(|_| interval.is_none())
                        .ok_or_else(|| format!("unknown mode `{part}`"))?;
                    for c in list.split('+') {
                        let c = Component::parse(c).ok_or_else(|| format!("unknown component `{c}` in `{part}`"))?;
                        mode.disable.insert(c);
                    }
                }
            }
        }
        Ok(mode)
    }

    pub fn name(&self) -> String {
        if *self == Self::static_baseline() {
            return "static".into();
        }
        let mut parts = Vec::new();
        match (self.fixed_interval_when, self.drop_request_how) {
            (Some(n), true) => parts.push(format!("w/o-both@{n}")),
            (Some(n), false) => parts.push(format!("w/o-when@{n}")),
            (None, true) => parts.push("w/o-how".into()),
            (None, false) => {}
        }
        if !self.disable.is_empty() {
            let names: Vec<&str> = self.disable.iter().map(|c| c.as_str()).collect();
            parts.push(format!("w/o-{}", names.join("+")));
        }
        if self.no_reconfigure_tool {
            parts.push("no-reconfigure".into());
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join(",")
        }
    }
}

/// Mutable per-run counters shared across stages.
#[derive(Debug, Clone, Default)]
pub struct RunState {
    pub completions: usize,
    pub metrics: RunMetrics,
    pub events: Vec<PromptEvent>,
    pub backend_failed: bool,
}

enum Turn {
    Malformed(String),
    Finish(FinishPayload),
    Reconfigure(String, ReconfigRequest),
    Task(String, ToolCall),
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Stable id from the task text and the mode.
pub fn trajectory_id(task: &str, mode: &AblationMode) -> String {
    let digest = Sha256::digest(format!("{task}\n{}", mode.name()).as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// First lines of each step's thought, used when the runtime ends a stage.
pub fn auto_summary(steps: &[Step]) -> String {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let first = s.thought.lines().map(str::trim).find(|l| !l.is_empty());
            match first {
                Some(line) => format!("{}. {line}", i + 1),
                None => format!("{}. Called {}.", i + 1, s.call.name),
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn corrective(why: &str) -> String {
    format!(
        "Your last output was not a valid tool call: {why}. Reply with one <think> block \
         followed by exactly one <tool_call> block."
    )
}

pub struct Orchestrator {
    agent: Arc<dyn ChatBackend>,
    agent_params: SamplingParams,
    engine_backend: Arc<dyn ChatBackend>,
    engine_params: SamplingParams,
    pool: GlobalToolPool,
    registry: ToolRegistry,
    templates: PromptTemplates,
    limits: RunLimits,
    budget: ContextBudget,
    mode: AblationMode,
    counter: Arc<dyn TokenCounter>,
    scenario: Option<String>,
    toolbox_minimum: bool,
}

impl Orchestrator {
    pub fn new(
        agent: Arc<dyn ChatBackend>,
        engine: Arc<dyn ChatBackend>,
        pool: GlobalToolPool,
        registry: ToolRegistry,
    ) -> Self {
        Self {
            agent,
            agent_params: SamplingParams::runtime(),
            engine_backend: engine,
            engine_params: SamplingParams::runtime(),
            pool,
            registry,
            templates: PromptTemplates::builtin(),
            limits: RunLimits::default(),
            budget: ContextBudget::default(),
            mode: AblationMode::full(),
            counter: Arc::new(ApproxCounter),
            scenario: None,
            toolbox_minimum: true,
        }
    }

    pub fn with_toolbox_minimum(mut self, enforce: bool) -> Self {
        self.toolbox_minimum = enforce;
        self
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_agent_params(mut self, params: SamplingParams) -> Self {
        self.agent_params = params;
        self
    }

    pub fn with_engine_params(mut self, params: SamplingParams) -> Self {
        self.engine_params = params;
        self
    }

    pub fn with_limits(mut self, limits: RunLimits) -> Self {
        self.limits = limits;
        self
    }

    pub fn with_budget(mut self, budget: ContextBudget) -> Self {
        self.budget = budget;
        self
    }

    pub fn with_mode(mut self, mode: AblationMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_counter(mut self, counter: Arc<dyn TokenCounter>) -> Self {
        self.counter = counter;
        self
    }

    pub fn with_scenario(mut self, name: impl Into<String>) -> Self {
        self.scenario = Some(name.into());
        self
    }

    pub fn mode(&self) -> &AblationMode {
        &self.mode
    }

    pub fn pool(&self) -> &GlobalToolPool {
        &self.pool
    }

    fn engine(&self) -> ReconfigEngine {
        ReconfigEngine::new(
            Arc::clone(&self.engine_backend),
            self.engine_params.clone(),
            self.templates.clone(),
        )
        .with_toolbox_minimum(self.toolbox_minimum)
    }

    /// Re-imposes every disabled field.
    pub fn pin(&self, task: &str, mut config: StageConfiguration) -> StageConfiguration {
        for c in &self.mode.disable {
            match c {
                Component::SubGoal => config.sub_goal = task.to_string(),
                Component::Strategy => config.strategy = GENERIC_STRATEGY.to_string(),
                Component::Toolbox => config.toolbox = self.pool.task_tool_names(),
                Component::Context => config.knowledge.clear(),
            }
        }
        config
    }

    fn all_pinned(&self) -> bool {
        self.mode.disable.len() == Component::ALL.len()
    }

    // With every field pinned the engine's answer would be discarded, so it
    // is not asked.
    fn pinned_call(&self, task: &str, history: &GlobalHistoryPool) -> EngineCall {
        let config = self.pin(
            task,
            StageConfiguration {
                stage_index: history.len(),
                sub_goal: String::new(),
                strategy: String::new(),
                toolbox: Vec::new(),
                knowledge: String::new(),
            },
        );
        EngineCall {
            output: EngineOutput {
                next_sub_goal: config.sub_goal.clone(),
                execution_strategy: config.strategy.clone(),
                toolbox: config.toolbox.clone(),
                inter_agent_knowledge: String::new(),
            },
            config,
            prompt: Vec::new(),
            attempts: 0,
            adopted: None,
            logprob: Some(0.0),
            usage: Default::default(),
            warnings: Vec::new(),
        }
    }

    fn configure(
        &self,
        engine: &ReconfigEngine,
        task: &str,
        history: &GlobalHistoryPool,
        request: Option<&ReconfigRequest>,
        run: &mut RunState,
    ) -> Result<EngineCall, EngineError> {
        if self.all_pinned() {
            return Ok(self.pinned_call(task, history));
        }
        let mut call = engine.reconfigure(task, &self.pool, history, request)?;
        run.metrics.engine_calls += 1;
        run.metrics.engine_prompt_tokens += call.usage.prompt_tokens;
        if let Some(adopted) = call.adopted {
            run.metrics.adoption_eligible += 1;
            run.metrics.adopted += usize::from(adopted);
        }
        call.config = self.pin(task, call.config);
        Ok(call)
    }

    /// The first configuration: no request, empty history.
    pub fn initialize(&self, task: &str) -> Result<StageConfiguration, EngineError> {
        let mut run = RunState::default();
        self.configure(&self.engine(), task, &GlobalHistoryPool::new(), None, &mut run)
            .map(|call| call.config)
    }

    fn offered_schemas(&self) -> Vec<ToolSchema> {
        let mut out: Vec<ToolSchema> = self.pool.task_tools().cloned().collect();
        if self.mode.reconfigure_offered() {
            out.push(self.pool.reconfigure_schema().clone());
        }
        out.push(self.pool.finish_schema().clone());
        out
    }

    fn interpret(&self, text: &str) -> Turn {
        let turn = match parse_assistant_turn(text) {
            Ok(t) => t,
            Err(e) => return Turn::Malformed(e.to_string()),
        };
        match turn.call.name.as_str() {
            FINISH_TOOL => {
                if let Err(e) = validate_call(&turn.call, self.pool.finish_schema()) {
                    return Turn::Malformed(format!("invalid finish call: {e}"));
                }
                match serde_json::from_value::<FinishPayload>(turn.call.arguments) {
                    Ok(p) => Turn::Finish(p),
                    Err(e) => Turn::Malformed(format!("invalid finish call: {e}")),
                }
            }
            RECONFIGURE_TOOL => {
                if !self.mode.reconfigure_offered() {
                    return Turn::Malformed(
                        "the reconfigure tool is not available; use the toolbox or call finish".into(),
                    );
                }
                if let Err(e) = validate_call(&turn.call, self.pool.reconfigure_schema()) {
                    return Turn::Malformed(format!("invalid reconfigure call: {e}"));
                }
                match ReconfigRequest::from_reconfigure_arguments(&turn.call.arguments) {
                    Ok((summary, req)) => Turn::Reconfigure(summary, req),
                    Err(e) => Turn::Malformed(e.to_string()),
                }
            }
            _ => Turn::Task(turn.thought, turn.call),
        }
    }

    fn execute(&self, config: &StageConfiguration, call: &ToolCall, session: &mut ToolSession) -> Observation {
        if !config.toolbox.contains(&call.name) {
            let err = ToolError::failure(
                &call.name,
                format!("not in the current toolbox ({})", config.toolbox.join(", ")),
            );
            return Observation::from_error(&call.name, &err);
        }
        self.registry.dispatch(call, session)
    }

    fn assemble(prefix: &[ChatMessage], window: &[Step], pending: &[ChatMessage]) -> Vec<ChatMessage> {
        let mut m = prefix.to_vec();
        m.extend(window.iter().flat_map(Step::messages));
        m.extend(pending.iter().cloned());
        m
    }

    // Builds the next prompt, applying the context policy to `window`.
    fn next_prompt(
        &self,
        prefix: &[ChatMessage],
        window: &mut Vec<Step>,
        pending: &[ChatMessage],
    ) -> (Vec<ChatMessage>, usize, bool) {
        let counter = self.counter.as_ref();
        let fixed = prompt_tokens(prefix, counter) + prompt_tokens(pending, counter);
        let raw_tokens = fixed + steps_tokens(window, counter);
        let policy = apply_context_policy(window, fixed, &self.budget, counter);
        *window = policy.steps;
        let max = self.budget.max_context_tokens;
        let mut messages = Self::assemble(prefix, window, pending);
        let mut tokens = prompt_tokens(&messages, counter);
        while tokens > max && window.len() > 1 {
            window.remove(0);
            messages = Self::assemble(prefix, window, pending);
            tokens = prompt_tokens(&messages, counter);
        }
        if tokens > max {
            if let Some(i) = window.len().checked_sub(1) {
                let mut cap = window[i].observation.body.chars().count();
                while tokens > max && cap > 256 {
                    cap /= 2;
                    window[i].observation.truncate(cap);
                    messages = Self::assemble(prefix, window, pending);
                    tokens = prompt_tokens(&messages, counter);
                }
            }
        }
        (messages, raw_tokens, policy.cleaned || raw_tokens > tokens)
    }

    /// Runs one stage under `config` until it reconfigures, finishes, or
    /// hits a limit.
    pub fn run_stage(
        &self,
        task: &str,
        config: &StageConfiguration,
        session: &mut ToolSession,
        run: &mut RunState,
    ) -> StageTrace {
        let schemas = self.offered_schemas();
        let prefix = match render_inference_prompt(&self.templates, task, config, &schemas) {
            Ok(bundle) => bundle.messages(),
            Err(e) => {
                return StageTrace {
                    prompt: Vec::new(),
                    steps: Vec::new(),
                    terminal: StageOutcome::stopped(OutcomeKind::Aborted, e.to_string()),
                    logprob: None,
                }
            }
        };
        let mut steps: Vec<Step> = Vec::new();
        let mut window: Vec<Step> = Vec::new();
        let mut pending: Vec<ChatMessage> = Vec::new();
        let mut failures = 0usize;
        let mut logprob = Some(0.0);
        let mut any_completion = false;

        let terminal = loop {
            if run.completions >= self.limits.max_iterations {
                break StageOutcome::stopped(
                    OutcomeKind::LimitExceeded,
                    format!("iteration budget of {} completions exhausted", self.limits.max_iterations),
                );
            }
            let (messages, raw_tokens, cleanup) = self.next_prompt(&prefix, &mut window, &pending);
            let tokens = prompt_tokens(&messages, self.counter.as_ref());
            run.events.push(PromptEvent {
                stage_index: config.stage_index,
                prompt_tokens: tokens,
                raw_tokens,
                cleanup,
                window_steps: window.len(),
            });
            run.metrics.cleanups += usize::from(cleanup);
            run.metrics.max_prompt_tokens = run.metrics.max_prompt_tokens.max(tokens);
            run.metrics.total_prompt_tokens += tokens;

            let completion = match self.agent.complete(&messages, &self.agent_params) {
                Ok(c) => c,
                Err(e) => {
                    run.backend_failed = true;
                    break StageOutcome::stopped(OutcomeKind::Aborted, format!("agent backend: {e}"));
                }
            };
            run.completions += 1;
            run.metrics.completions += 1;
            run.metrics.total_output_tokens += completion.usage.output_tokens;
            any_completion = true;
            logprob = logprob.zip(completion.logprob_sum()).map(|(a, b)| a + b);
            let text = completion.text;

            match self.interpret(&text) {
                Turn::Malformed(why) => {
                    failures += 1;
                    run.metrics.parse_failures += 1;
                    log::warn!("stage {}: malformed completion ({why})", config.stage_index);
                    if failures >= MAX_PARSE_FAILURES {
                        break StageOutcome::stopped(
                            OutcomeKind::Aborted,
                            format!("{failures} consecutive malformed completions; last: {why}"),
                        );
                    }
                    pending.push(ChatMessage::assistant(text));
                    pending.push(ChatMessage::user(corrective(&why)));
                }
                Turn::Finish(payload) => break StageOutcome::finished(payload, text),
                Turn::Reconfigure(summary, request) => {
                    let h = ExecutionSummary::new(config.stage_index, config.sub_goal.clone(), summary)
                        .expect("summary checked non-empty");
                    break StageOutcome::reconfigured(h, request, Some(text));
                }
                Turn::Task(thought, call) => {
                    failures = 0;
                    pending.clear();
                    let observation = self.execute(config, &call, session);
                    let step = Step { thought, call, observation, raw: Some(text) };
                    steps.push(step.clone());
                    window.push(step);
                    run.metrics.steps += 1;
                    if let Some(n) = self.mode.fixed_interval_when {
                        if steps.len() == n {
                            let h = ExecutionSummary::new(config.stage_index, config.sub_goal.clone(), auto_summary(&steps))
                                .expect("auto summary is non-empty");
                            let request = ReconfigRequest {
                                proposed_sub_goal: config.sub_goal.clone(),
                                update_reason: format!("Fixed-interval reconfiguration after {n} steps"),
                                update_content: UpdateContent::SubGoal,
                                details: None,
                            };
                            break StageOutcome::reconfigured(h, request, None);
                        }
                    }
                }
            }
        };
        StageTrace {
            prompt: prefix,
            steps,
            terminal,
            logprob: if any_completion { logprob } else { None },
        }
    }

    /// Runs `task` to completion and returns the full trajectory.
    pub fn run_task(&self, task: &str, session: &mut ToolSession) -> Trajectory {
        let started_ms = now_ms();
        session.default_timeout = self.limits.per_step_timeout();
        let engine = self.engine();
        let mut run = RunState::default();
        let mut history = GlobalHistoryPool::new();
        let mut stages: Vec<StageRecord> = Vec::new();
        let mut final_result = None;
        let mut reason = None;

        let status = match self.configure(&engine, task, &history, None, &mut run) {
            Err(e) => {
                reason = Some(e.to_string());
                engine_failure_status(&e)
            }
            Ok(mut call) => loop {
                let config = call.config.clone();
                let trace = self.run_stage(task, &config, session, &mut run);
                let terminal = trace.terminal.clone();
                stages.push(StageRecord { config, engine: call, trace });
                match terminal.kind {
                    OutcomeKind::Finished => {
                        final_result = terminal.final_payload.map(|p| p.final_result);
                        break RunStatus::Finished;
                    }
                    OutcomeKind::LimitExceeded => {
                        reason = terminal.reason;
                        break RunStatus::IterationLimitExceeded;
                    }
                    OutcomeKind::Aborted => {
                        reason = terminal.reason;
                        break if run.backend_failed { RunStatus::BackendFailure } else { RunStatus::Aborted };
                    }
                    OutcomeKind::Reconfigured => {
                        let summary = terminal.summary.expect("reconfigured stages carry a summary");
                        history.push(summary).expect("stage indices follow the history length");
                        run.metrics.reconfigs += 1;
                        if run.metrics.reconfigs > self.limits.max_reconfigs {
                            reason = Some(format!(
                                "more than {} reconfigurations",
                                self.limits.max_reconfigs
                            ));
                            break RunStatus::ReconfigLimitExceeded;
                        }
                        let request = if self.mode.drop_request_how {
                            None
                        } else {
                            terminal.request.as_ref()
                        };
                        match self.configure(&engine, task, &history, request, &mut run) {
                            Ok(next) => call = next,
                            Err(e) => {
                                reason = Some(e.to_string());
                                break engine_failure_status(&e);
                            }
                        }
                    }
                }
            },
        };

        let mut t = Trajectory {
            version: LEDGER_VERSION,
            id: trajectory_id(task, &self.mode),
            task: task.to_string(),
            stages,
            status,
            outcome: Outcome::Unlabeled,
            final_result,
            reason,
            history,
            logprob_bundle: None,
            metrics: run.metrics,
            prompt_events: run.events,
            metadata: RunMetadata {
                agent_params: self.agent_params.clone(),
                engine_params: self.engine_params.clone(),
                mode: self.mode.clone(),
                limits: self.limits.clone(),
                budget: self.budget.clone(),
                scenario: self.scenario.clone(),
                started_ms,
                finished_ms: now_ms(),
            },
        };
        t.logprob_bundle = t.collect_logprobs();
        t
    }
}

fn engine_failure_status(e: &EngineError) -> RunStatus {
    match e {
        EngineError::Backend(_) => RunStatus::BackendFailure,
        _ => RunStatus::EngineFailure,
    }
}

#[cfg(test)]
mod tests;
