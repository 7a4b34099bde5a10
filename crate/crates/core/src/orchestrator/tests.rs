use std::sync::Arc;

use serde_json::json;

use super::*;
use crate::config::UpdateContent;
use crate::llm::{ScriptEntry, ScriptedBackend};
use crate::scenario::{engine_reply, finish_turn, reconfigure_turn, task_turn};
use crate::tools::MockEnvironment;

const TB: [&str; 3] = ["search", "visit", "code_interpreter"];

fn cfg(goal: &str, knowledge: &str) -> String {
    engine_reply(goal, "As a Researcher: search first", &TB, knowledge)
}

fn search(i: usize) -> String {
    task_turn(&format!("look {i}"), "search", json!({"query": [format!("q{i}")]}))
}

fn reconf(goal: &str) -> String {
    reconfigure_turn("switch", "did things", goal, "need more", UpdateContent::SubGoal)
}

fn done(result: &str) -> String {
    finish_turn("done", result, &["search"])
}

struct Rig {
    agent: Arc<ScriptedBackend>,
    engine: Arc<ScriptedBackend>,
    orch: Orchestrator,
}

fn rig(agent: Vec<String>, engine: Vec<String>, mode: AblationMode) -> Rig {
    let agent = Arc::new(ScriptedBackend::from_texts("agent", agent));
    let engine = Arc::new(ScriptedBackend::from_texts("engine", engine));
    let pool = GlobalToolPool::default_pool();
    let registry = ToolRegistry::mock(&pool);
    let orch = Orchestrator::new(agent.clone(), engine.clone(), pool, registry).with_mode(mode);
    Rig { agent, engine, orch }
}

fn session() -> ToolSession {
    ToolSession::mock(MockEnvironment::with_default("mock result"))
}

fn run(r: &Rig) -> Trajectory {
    r.orch.run_task("Find the answer", &mut session())
}

#[test]
fn finish_in_first_stage() {
    let r = rig(vec![search(0), done("42")], vec![cfg("g0", "")], AblationMode::full());
    let t = run(&r);
    assert_eq!(t.status, RunStatus::Finished);
    assert_eq!(t.final_result.as_deref(), Some("42"));
    assert_eq!(t.stage_count(), 1);
    assert!(t.history.is_empty());
    assert_eq!(t.metrics.steps, 1);
    assert_eq!(t.metrics.completions, 2);
    assert_eq!(t.stages[0].trace.steps[0].observation.body, "mock result");
    assert_eq!(t.stages[0].config.knowledge, "");
    assert_eq!(t.outcome, Outcome::Unlabeled);
}

#[test]
fn immediate_finish() {
    let r = rig(vec![done("x")], vec![cfg("g0", "")], AblationMode::full());
    let t = run(&r);
    assert_eq!(t.status, RunStatus::Finished);
    assert!(t.stages[0].trace.steps.is_empty());
    assert_eq!(t.stages[0].trace.terminal.kind, OutcomeKind::Finished);
}

#[test]
fn reconfiguration_archives_and_discards() {
    let r = rig(
        vec![search(0), reconf("next goal"), search(1), done("ok")],
        vec![cfg("g0", ""), cfg("next goal", "ALL")],
        AblationMode::full(),
    );
    let t = run(&r);
    assert_eq!(t.status, RunStatus::Finished);
    assert_eq!(t.stage_count(), 2);
    assert_eq!(t.history.len(), 1);
    assert_eq!(t.metrics.reconfigs, 1);
    assert_eq!(t.metrics.adoption_rate(), Some(1.0));
    assert_eq!(t.stages[1].config.stage_index, 1);
    assert!(t.stages[1].config.knowledge.contains("did things"));
    // the request reached the engine
    let engine_prompts = r.engine.prompts();
    assert!(engine_prompts[1].iter().any(|m| m.content.contains("need more")));
    // stage 1 prompts never carry stage 0's steps
    let prompts = r.agent.prompts();
    for p in &prompts[2..] {
        assert!(!p.iter().any(|m| m.content.contains("look 0")));
    }
}

#[test]
fn dropping_the_request() {
    let r = rig(
        vec![reconf("proposed"), done("ok")],
        vec![cfg("g0", ""), cfg("other", "ALL")],
        AblationMode::without_how(),
    );
    let t = run(&r);
    assert_eq!(t.status, RunStatus::Finished);
    let p = r.engine.prompts();
    assert!(!p[1].iter().any(|m| m.content.contains("need more")));
    assert!(p[1].iter().any(|m| m.content.contains("<update_requirement>\nNONE")));
    // the agent's request is still recorded
    assert!(t.stages[0].trace.terminal.request.is_some());
}

#[test]
fn fixed_interval_forces_stages() {
    let agent: Vec<String> = (0..7).map(search).chain([done("ok")]).collect();
    let r = rig(agent, vec![cfg("g0", ""), cfg("g1", "ALL")], AblationMode::without_when(5));
    let t = run(&r);
    assert_eq!(t.status, RunStatus::Finished);
    assert_eq!(t.stages[0].trace.steps.len(), 5);
    assert_eq!(t.stages[1].trace.steps.len(), 2);
    let term = &t.stages[0].trace.terminal;
    assert!(term.forced);
    assert_eq!(term.request.as_ref().unwrap().proposed_sub_goal, "g0");
    assert!(t.history.entries()[0].summary.starts_with("1. look 0\n2. look 1"));
    // no reconfigure tool on offer
    let first = &r.agent.prompts()[0];
    assert!(!first.iter().any(|m| m.content.contains("\"name\":\"reconfigure\"")));
}

#[test]
fn reconfigure_without_the_tool_is_malformed() {
    let r = rig(vec![reconf("x"), done("ok")], vec![cfg("g0", "")], AblationMode::without_when(5));
    let t = run(&r);
    assert_eq!(t.status, RunStatus::Finished);
    assert_eq!(t.metrics.parse_failures, 1);
    assert_eq!(t.stage_count(), 1);
}

#[test]
fn malformed_then_recovered() {
    let r = rig(vec!["no call here".into(), done("ok")], vec![cfg("g0", "")], AblationMode::full());
    let t = run(&r);
    assert_eq!(t.status, RunStatus::Finished);
    assert_eq!(t.metrics.parse_failures, 1);
    let second = &r.agent.prompts()[1];
    let n = second.len();
    assert_eq!(second[n - 2].content, "no call here");
    assert!(second[n - 1].content.starts_with("Your last output was not a valid tool call"));
}

#[test]
fn three_malformed_abort() {
    let r = rig(vec!["a".into(), "b".into(), "c".into()], vec![cfg("g0", "")], AblationMode::full());
    let t = run(&r);
    assert_eq!(t.status, RunStatus::Aborted);
    assert!(t.reason.unwrap().contains("3 consecutive"));
}

#[test]
fn tool_outside_toolbox_is_an_error_observation() {
    let bash = task_turn("try bash", "execute_bash", json!({"command": "ls"}));
    let r = rig(vec![bash, done("ok")], vec![cfg("g0", "")], AblationMode::full());
    let t = run(&r);
    let obs = &t.stages[0].trace.steps[0].observation.body;
    assert!(obs.starts_with("Error:") && obs.contains("not in the current toolbox"), "{obs}");
}

#[test]
fn reconfiguration_limit() {
    let agent: Vec<String> = (0..3).map(|i| reconf(&format!("g{i}"))).collect();
    let engine: Vec<String> = (0..3).map(|i| cfg(&format!("g{i}"), if i == 0 { "" } else { "ALL" })).collect();
    let r = rig(agent, engine, AblationMode::full());
    let orch = r.orch.with_limits(RunLimits { max_reconfigs: 1, ..RunLimits::default() });
    let t = orch.run_task("Find the answer", &mut session());
    assert_eq!(t.status, RunStatus::ReconfigLimitExceeded);
    assert_eq!(t.history.len(), 2);
    assert_eq!(t.metrics.engine_calls, 2);
    assert_eq!(r.engine.calls(), 2);
}

#[test]
fn iteration_limit() {
    let agent: Vec<String> = (0..5).map(search).collect();
    let r = rig(agent, vec![cfg("g0", "")], AblationMode::full());
    let orch = r.orch.with_limits(RunLimits { max_iterations: 3, ..RunLimits::default() });
    let t = orch.run_task("Find the answer", &mut session());
    assert_eq!(t.status, RunStatus::IterationLimitExceeded);
    assert_eq!(t.metrics.completions, 3);
    assert_eq!(t.stages[0].trace.terminal.kind, OutcomeKind::LimitExceeded);
}

#[test]
fn backend_and_engine_failures() {
    let r = rig(vec![search(0)], vec![cfg("g0", "")], AblationMode::full());
    let t = run(&r);
    assert_eq!(t.status, RunStatus::BackendFailure);

    let r = rig(vec![], vec!["nonsense".into(); 3], AblationMode::full());
    let t = run(&r);
    assert_eq!(t.status, RunStatus::EngineFailure);
    assert!(t.stages.is_empty());
}

#[test]
fn pinning_applies_after_every_engine_call() {
    let r = rig(
        vec![reconf("g1"), done("ok")],
        vec![cfg("g0", ""), cfg("g1", "ALL")],
        AblationMode::disabling([Component::Toolbox, Component::Context]),
    );
    let t = run(&r);
    let full = GlobalToolPool::default_pool().task_tool_names();
    for s in &t.stages {
        assert_eq!(s.config.toolbox, full);
        assert_eq!(s.config.knowledge, "");
    }
    assert_eq!(t.stages[1].config.sub_goal, "g1");
}

#[test]
fn static_baseline_never_calls_the_engine() {
    let r = rig(vec![search(0), done("ok")], vec![], AblationMode::static_baseline());
    let t = run(&r);
    assert_eq!(t.status, RunStatus::Finished);
    assert_eq!(r.engine.calls(), 0);
    let c = &t.stages[0].config;
    assert_eq!(c.sub_goal, "Find the answer");
    assert_eq!(c.strategy, GENERIC_STRATEGY);
    assert_eq!(c.knowledge, "");
}

#[test]
fn cleanup_runs_when_window_grows() {
    let agent: Vec<String> = (0..6).map(search).chain([done("ok")]).collect();
    let pool = GlobalToolPool::default_pool();
    let mut env = MockEnvironment::with_default("x".repeat(4_000));
    env.reset();
    let orch = Orchestrator::new(
        Arc::new(ScriptedBackend::from_texts("agent", agent)),
        Arc::new(ScriptedBackend::from_texts("engine", [cfg("g0", "")])),
        pool.clone(),
        ToolRegistry::mock(&pool),
    )
    .with_budget(ContextBudget {
        max_context_tokens: 6_000,
        keep_last_iterations: 2,
        ..ContextBudget::default()
    });
    let t = orch.run_task("Find the answer", &mut ToolSession::mock(env));
    assert_eq!(t.status, RunStatus::Finished);
    assert!(t.metrics.cleanups > 0);
    for e in &t.prompt_events {
        assert!(e.prompt_tokens <= 6_000, "{e:?}");
        if e.raw_tokens >= 4_800 {
            assert!(e.cleanup);
        }
    }
    // the recorded trace keeps every step
    assert_eq!(t.stages[0].trace.steps.len(), 6);
}

#[test]
fn logprobs_collected_when_available() {
    let lp = |text: String, v: f64| ScriptEntry {
        text,
        expect_contains: vec![],
        token_logprobs: Some(vec![crate::llm::TokenLogprob { token: "t".into(), logprob: v }]),
    };
    let agent = ScriptedBackend::new("agent", vec![lp(reconf("g1"), -1.0), lp(done("ok"), -2.0)]);
    let engine = ScriptedBackend::new("engine", vec![lp(cfg("g0", ""), -0.5), lp(cfg("g1", "ALL"), -0.25)]);
    let pool = GlobalToolPool::default_pool();
    let orch = Orchestrator::new(Arc::new(agent), Arc::new(engine), pool.clone(), ToolRegistry::mock(&pool));
    let t = orch.run_task("Find the answer", &mut session());
    let b = t.logprob_bundle.clone().unwrap();
    assert_eq!(b.initial_config, -0.5);
    assert_eq!(b.stage_traces, vec![-1.0, -2.0]);
    assert_eq!(b.reconfigs, vec![-0.25]);
    assert_eq!(b.total(), -3.75);
}

#[test]
fn ids_and_mode_names() {
    assert_eq!(trajectory_id("q", &AblationMode::full()).len(), 16);
    assert_ne!(
        trajectory_id("q", &AblationMode::full()),
        trajectory_id("q", &AblationMode::without_how())
    );
    assert_eq!(AblationMode::full().name(), "full");
    assert_eq!(AblationMode::without_both(5).name(), "w/o-both@5");
    assert_eq!(AblationMode::static_baseline().name(), "static");
    assert_eq!(
        AblationMode::disabling([Component::Context, Component::SubGoal]).name(),
        "w/o-sub_goal+context"
    );
}

#[test]
fn mode_names_round_trip() {
    let modes = [
        AblationMode::full(),
        AblationMode::without_when(5),
        AblationMode::without_how(),
        AblationMode::without_both(3),
        AblationMode::static_baseline(),
        AblationMode::disabling([Component::Strategy]),
        AblationMode { no_reconfigure_tool: true, ..AblationMode::without_how() },
        AblationMode { drop_request_how: true, ..AblationMode::disabling(Component::ALL) },
    ];
    for m in modes {
        assert_eq!(AblationMode::from_name(&m.name()).unwrap(), m, "{}", m.name());
    }
    assert_eq!(AblationMode::from_name("w/o-when").unwrap(), AblationMode::without_when(DEFAULT_INTERVAL));
    for bad in ["w/o-nothing", "w/o-when@0", "w/o-when@x", "sideways", "full@2"] {
        assert!(AblationMode::from_name(bad).is_err(), "{bad}");
    }
}
