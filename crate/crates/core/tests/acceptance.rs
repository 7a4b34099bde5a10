//! End-to-end acceptance checks. Run with
//! `cargo test -p stagewise-core --test acceptance`; prints one line per
//! criterion and exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

use stagewise::codec::{
    parse_assistant_turn, parse_tool_response, render_tool_response, validate_call, ToolCall,
};
use stagewise::config::{GlobalToolPool, UpdateContent, FINISH_TOOL};
use stagewise::ledger::{
    export_datasets, filter_rft, kto_loss, load, persist, ExportFormat, KtoParams,
    OutcomeKind,
};
use stagewise::llm::{ChatMessage, ScriptEntry, ScriptedBackend};
use stagewise::orchestrator::GENERIC_STRATEGY;
use stagewise::prompt::{render_inference_prompt, PromptTemplates};
use stagewise::scenario::{engine_reply, finish_turn, reconfigure_turn, task_turn, Scenario};
use stagewise::tools::{MockEnvironment, MockRule, MockScript};
use stagewise::{
    AblationMode, ChatBackend, Component, ContextBudget, Orchestrator, ReconfigRequest, RunLimits,
    RunStatus, SamplingParams, StageConfiguration, Step, ToolRegistry, ToolSession, Trajectory,
};

// Tolerances.
const KTO_POINT_TOL: f64 = 1e-5;
const KTO_SYMMETRY_TOL: f64 = 1e-12;
const CASE_RUNTIME: Duration = Duration::from_secs(5);
const CONTEXT_RUNTIME: Duration = Duration::from_secs(10);

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

const TB: [&str; 3] = ["search", "visit", "code_interpreter"];

fn search(label: &str) -> String {
    task_turn(&format!("look {label}"), "search", json!({"query": [label]}))
}

fn reconf(goal: &str) -> String {
    reconfigure_turn("switch", "did things", goal, "need more", UpdateContent::SubGoal)
}

fn scripted(
    agent: Vec<String>,
    engine: Vec<String>,
    mode: AblationMode,
) -> (Arc<ScriptedBackend>, Arc<ScriptedBackend>, Orchestrator) {
    let agent = Arc::new(ScriptedBackend::from_texts("agent", agent));
    let engine = Arc::new(ScriptedBackend::from_texts("engine", engine));
    let pool = GlobalToolPool::default_pool();
    let registry = ToolRegistry::mock(&pool);
    let orch = Orchestrator::new(agent.clone(), engine.clone(), pool, registry).with_mode(mode);
    (agent, engine, orch)
}

fn mock_session(body: &str) -> ToolSession {
    ToolSession::mock(MockEnvironment::with_default(body))
}

fn replay(name: &str) -> Result<(Trajectory, Duration), String> {
    let s = Scenario::builtin(name).map_err(|e| e.to_string())?;
    let orch = s
        .orchestrator(AblationMode::full(), RunLimits::default(), ContextBudget::default())
        .map_err(|e| e.to_string())?;
    let started = Instant::now();
    let t = orch.run_task(&s.task, &mut s.session());
    Ok((t, started.elapsed()))
}

fn toolbox(t: &Trajectory, stage: usize) -> BTreeSet<&str> {
    t.stages[stage].config.toolbox.iter().map(String::as_str).collect()
}

fn criterion_1() -> Check {
    let (t, took) = replay("case1_nasa")?;
    ensure!(t.status == RunStatus::Finished, "status {:?} ({:?})", t.status, t.reason);
    ensure!(t.stage_count() == 5, "{} stages", t.stage_count());
    let answer = t.final_result.clone().unwrap_or_default();
    ensure!(answer.contains("White;5876"), "final {answer:?}");
    ensure!(!toolbox(&t, 0).contains("execute_bash"), "stage 1 already has execute_bash");
    ensure!(toolbox(&t, 1).contains("execute_bash"), "stage 2 lacks execute_bash");
    ensure!(took < CASE_RUNTIME, "took {took:?}");
    Ok(format!("5 stages, final {answer}, {took:?}"))
}

// Independent rendering of the history pool for the knowledge check.
fn oracle_history(entries: &[(usize, &str, &str)]) -> String {
    let mut blocks = Vec::new();
    for (k, goal, summary) in entries {
        blocks.push(format!("Iteration {k}:\nSub-goal: {goal}\nSummary: {summary}"));
    }
    blocks.join("\n\n")
}

fn criterion_2() -> Check {
    let (t, took) = replay("case2_asean")?;
    ensure!(t.status == RunStatus::Finished, "status {:?} ({:?})", t.status, t.reason);
    ensure!(t.stage_count() == 5, "{} stages", t.stage_count());
    ensure!(t.final_result.as_deref() == Some("Indonesia,Myanmar"), "final {:?}", t.final_result);
    let last = toolbox(&t, 4);
    ensure!(last == BTreeSet::from(["code_interpreter", "execute_bash"]), "stage 5 toolbox {last:?}");
    ensure!(t.history.len() >= 2, "history has {} entries", t.history.len());
    let first_two: Vec<(usize, &str, &str)> = t.history.entries()[..2]
        .iter()
        .enumerate()
        .map(|(i, e)| (i + 1, e.sub_goal.as_str(), e.summary.as_str()))
        .collect();
    let expected = oracle_history(&first_two);
    ensure!(t.stages[2].config.knowledge == expected, "stage 3 knowledge:\n{}\n---\nexpected:\n{expected}", t.stages[2].config.knowledge);
    ensure!(took < CASE_RUNTIME, "took {took:?}");
    Ok(format!("5 stages, stage 5 toolbox {last:?}, {took:?}"))
}

fn approx_tokens(messages: &[ChatMessage]) -> usize {
    messages.iter().map(|m| m.content.chars().count().div_ceil(4)).sum()
}

struct Synthetic {
    agent: Vec<String>,
    engine: Vec<String>,
    rules: Vec<MockRule>,
    stages: usize,
    steps: usize,
}

fn synthetic_long_run(rng: &mut StdRng) -> Synthetic {
    let stages = rng.random_range(6..=8);
    let mut agent = Vec::new();
    let mut engine = vec![engine_reply("stage 1", "search", &TB, "")];
    let mut rules = Vec::new();
    let mut steps = 0;
    for s in 1..=stages {
        let n = rng.random_range(7..=10);
        for k in 1..=n {
            let key = format!("<{s}.{k}>");
            agent.push(task_turn(&format!("marker-{s}-{k}"), "search", json!({"query": [key]})));
            let size = if rng.random_bool(0.3) {
                rng.random_range(10_000..40_000)
            } else {
                rng.random_range(200..2_000)
            };
            let body = format!("obs-{s}-{k} {}", "x".repeat(size));
            rules.push(MockRule::new("search", body).containing(key));
            steps += 1;
        }
        if s < stages {
            agent.push(reconfigure_turn(
                "moving on",
                &format!("stage {s} wrapped up"),
                &format!("stage {}", s + 1),
                "next part",
                UpdateContent::SubGoal,
            ));
            engine.push(engine_reply(&format!("stage {}", s + 1), "search", &TB, "ALL"));
        } else {
            agent.push(finish_turn("done", "ok", &["search"]));
        }
    }
    Synthetic { agent, engine, rules, stages, steps }
}

fn criterion_3() -> Check {
    let budget = ContextBudget::default();
    let threshold = budget.threshold();
    let max = budget.max_context_tokens;
    let mut took = Duration::ZERO;
    let (mut over_threshold, mut cleanups, mut peak) = (0usize, 0usize, 0usize);
    for seed in 0..100u64 {
        let mut rng = StdRng::seed_from_u64(seed);
        let syn = synthetic_long_run(&mut rng);
        let (agent, _, orch) = scripted(syn.agent, syn.engine, AblationMode::full());
        let mut session = ToolSession::mock(MockEnvironment::new(MockScript {
            rules: syn.rules,
            default_body: "unused".into(),
        }));
        let started = Instant::now();
        let t = orch.run_task("long task", &mut session);
        took += started.elapsed();
        ensure!(t.status == RunStatus::Finished, "seed {seed}: {:?} {:?}", t.status, t.reason);
        ensure!(t.stage_count() == syn.stages && t.metrics.steps == syn.steps, "seed {seed}: shape");
        ensure!(syn.steps >= 40 && syn.stages >= 6, "seed {seed}: run too small");
        let prompts = agent.prompts();
        ensure!(prompts.len() == t.prompt_events.len(), "seed {seed}: event count");
        for (i, (prompt, ev)) in prompts.iter().zip(&t.prompt_events).enumerate() {
            let tokens = approx_tokens(prompt);
            peak = peak.max(tokens);
            ensure!(tokens <= max, "seed {seed} prompt {i}: {tokens} tokens");
            ensure!(tokens == ev.prompt_tokens, "seed {seed} prompt {i}: recorded {} vs {tokens}", ev.prompt_tokens);
            if ev.raw_tokens >= threshold {
                over_threshold += 1;
                ensure!(
                    ev.cleanup || ev.window_steps <= budget.keep_last_iterations,
                    "seed {seed} prompt {i}: {} raw tokens without cleanup",
                    ev.raw_tokens
                );
            }
            cleanups += usize::from(ev.cleanup);
            let text: String = prompt.iter().map(|m| m.content.as_str()).collect();
            let stage = ev.stage_index + 1;
            for earlier in 1..stage {
                for needle in [format!("marker-{earlier}-"), format!("obs-{earlier}-")] {
                    ensure!(!text.contains(&needle), "seed {seed} prompt {i} (stage {stage}) leaks {needle}");
                }
            }
        }
    }
    ensure!(over_threshold > 0 && cleanups > 0, "budget never exercised");
    ensure!(took < CONTEXT_RUNTIME, "took {took:?}");
    Ok(format!("100 runs, peak {peak} tokens, {over_threshold} prompts over threshold, {cleanups} cleanups, {took:?}"))
}

fn reconfig_chain(n: usize, then_finish: bool) -> Trajectory {
    let mut agent: Vec<String> = (0..n).map(|i| reconf(&format!("g{}", i + 1))).collect();
    if then_finish {
        agent.push(finish_turn("done", "x", &[]));
    }
    let engine: Vec<String> = (0..=n)
        .map(|i| engine_reply(&format!("g{i}"), "s", &TB, if i == 0 { "" } else { "ALL" }))
        .collect();
    let (_, _, orch) = scripted(agent, engine, AblationMode::full());
    orch.run_task("t", &mut mock_session("r"))
}

fn criterion_4() -> Check {
    let limits = RunLimits::default();
    let over = reconfig_chain(limits.max_reconfigs + 1, true);
    ensure!(over.status == RunStatus::ReconfigLimitExceeded, "31 reconfigurations: {:?}", over.status);
    ensure!(over.status.is_failure(), "limit is not a failure");
    let at = reconfig_chain(limits.max_reconfigs, true);
    ensure!(at.status == RunStatus::Finished, "30 reconfigurations: {:?} {:?}", at.status, at.reason);

    let steps = |n: usize, finish: bool| {
        let mut agent: Vec<String> = (0..n).map(|i| search(&format!("q{i}"))).collect();
        if finish {
            agent.push(finish_turn("done", "x", &["search"]));
        }
        let (_, _, orch) = scripted(agent, vec![engine_reply("g", "s", &TB, "")], AblationMode::full());
        orch.run_task("t", &mut mock_session("r"))
    };
    let long = steps(limits.max_iterations + 50, true);
    ensure!(long.status == RunStatus::IterationLimitExceeded, "iteration cap: {:?}", long.status);
    ensure!(long.metrics.completions == limits.max_iterations, "{} completions", long.metrics.completions);
    let edge = steps(limits.max_iterations - 1, true);
    ensure!(edge.status == RunStatus::Finished, "199 steps + finish: {:?}", edge.status);
    Ok(format!(
        "31 reconfigs -> {:?}, 30 -> Finished, cap hit after {} completions",
        over.status, long.metrics.completions
    ))
}

fn random_trajectory(rng: &mut StdRng, idx: usize) -> Trajectory {
    let stages = rng.random_range(1..=5);
    let mut agent = Vec::new();
    let mut engine = vec![engine_reply("g0", "s", &TB, "")];
    for s in 0..stages {
        for k in 0..rng.random_range(0..=3) {
            agent.push(search(&format!("{idx}-{s}-{k}")));
        }
        if s + 1 < stages {
            agent.push(reconf(&format!("g{}", s + 1)));
            engine.push(engine_reply(&format!("g{}", s + 1), "s", &TB, "ALL"));
        } else {
            agent.push(finish_turn("end", "a", &["search"]));
        }
    }
    let (_, _, orch) = scripted(agent, engine, AblationMode::full());
    orch.run_task(&format!("task {idx}"), &mut mock_session("r"))
}

fn read_records(path: &std::path::Path) -> Result<Vec<Value>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    text.lines().map(|l| serde_json::from_str(l).map_err(|e| e.to_string())).collect()
}

fn criterion_5() -> Check {
    let mut rng = StdRng::seed_from_u64(5);
    let mut labels = BTreeMap::new();
    let mut trajectories = Vec::new();
    for i in 0..50 {
        let y = rng.random_bool(0.5);
        let t = random_trajectory(&mut rng, i).labeled(y);
        ensure!(t.status == RunStatus::Finished, "synthetic run {i} did not finish");
        ensure!(labels.insert(t.id.clone(), y).is_none(), "duplicate id {}", t.id);
        trajectories.push(t);
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let report = export_datasets(&trajectories, ExportFormat::Kto, dir.path(), "kto").map_err(|e| e.to_string())?;
    let total_stages: usize = trajectories.iter().map(Trajectory::stage_count).sum();
    let got = report.inference_records + report.reconfiguration_records;
    ensure!(got == 2 * total_stages, "{got} records for {total_stages} stages");

    // brute force: every (trajectory, stage, module) exactly once with its label
    let mut expected = BTreeSet::new();
    for t in &trajectories {
        for s in 0..t.stage_count() {
            for m in ["inference", "reconfiguration"] {
                expected.insert((t.id.clone(), s as u64, m.to_string(), labels[&t.id]));
            }
        }
    }
    let mut seen = BTreeSet::new();
    for path in [&report.inference_path, &report.reconfiguration_path] {
        for r in read_records(path)? {
            let key = (
                r["trajectory_id"].as_str().unwrap_or_default().to_string(),
                r["stage_index"].as_u64().unwrap_or(u64::MAX),
                r["module"].as_str().unwrap_or_default().to_string(),
                r["label"].as_bool().ok_or("record without label")?,
            );
            ensure!(seen.insert(key.clone()), "duplicate record {key:?}");
        }
    }
    ensure!(seen == expected, "record set differs from enumeration");

    let kept: BTreeSet<&str> = filter_rft(&trajectories).into_iter().map(|t| t.id.as_str()).collect();
    let successes: BTreeSet<&str> = labels.iter().filter(|(_, y)| **y).map(|(id, _)| id.as_str()).collect();
    ensure!(kept == successes, "rft filter kept {} of {} successes", kept.len(), successes.len());
    Ok(format!("{got} records over {} trajectories, {} kept for RFT", trajectories.len(), kept.len()))
}

// Written out independently of the library's loss.
fn oracle_kto(r: f64, desirable: bool, lambda: f64, beta: f64, z0: f64) -> f64 {
    let sigma = |x: f64| 1.0 / (1.0 + (-x).exp());
    if desirable {
        lambda * (1.0 - sigma(beta * (r - z0)))
    } else {
        lambda * (1.0 - sigma(beta * (z0 - r)))
    }
}

fn criterion_6() -> Check {
    let lambda: f64 = 1.7;
    let p = KtoParams { lambda_d: lambda, lambda_u: lambda, beta: 0.1, z0: 0.3 };
    for desirable in [true, false] {
        let at = kto_loss(p.z0, desirable, &p);
        ensure!((at - 0.5 * lambda).abs() < KTO_SYMMETRY_TOL, "loss at z0 = {at}");
    }
    let grid: Vec<f64> = (0..1000).map(|i| -50.0 + 100.0 * i as f64 / 999.0).collect();
    for w in grid.windows(2) {
        let (a, b) = (w[0], w[1]);
        ensure!(kto_loss(b, true, &p) < kto_loss(a, true, &p), "desirable loss not decreasing at {a}");
        ensure!(kto_loss(b, false, &p) > kto_loss(a, false, &p), "undesirable loss not increasing at {a}");
    }
    for &r in &grid {
        let d = kto_loss(r, true, &p);
        let u = kto_loss(2.0 * p.z0 - r, false, &p);
        ensure!((d - u).abs() < KTO_SYMMETRY_TOL, "reflection breaks at {r}: {d} vs {u}");
        let o = oracle_kto(r, true, lambda, 0.1, p.z0);
        ensure!((d - o).abs() < KTO_SYMMETRY_TOL, "oracle mismatch at {r}");
    }
    let unit = KtoParams::<f64>::default();
    let v = kto_loss(10.0, true, &unit);
    let oracle = oracle_kto(10.0, true, 1.0, 0.1, 0.0);
    ensure!((v - 0.26894).abs() < KTO_POINT_TOL && (v - oracle).abs() < KTO_POINT_TOL, "loss(10) = {v}, oracle {oracle}");
    let v32 = kto_loss(10.0f32, true, &KtoParams::<f32>::default());
    ensure!((f64::from(v32) - oracle).abs() < 1e-5, "f32 loss {v32}");
    Ok(format!("loss(10)={v:.6}, oracle {oracle:.6}"))
}

fn stage_sizes(t: &Trajectory) -> Vec<usize> {
    t.stages.iter().map(|s| s.trace.steps.len()).collect()
}

fn twelve_steps(mode: AblationMode) -> (Trajectory, Arc<ScriptedBackend>) {
    let mut agent: Vec<String> = (0..12).map(|i| search(&format!("q{i}"))).collect();
    agent.push(finish_turn("done", "x", &["search"]));
    let engine: Vec<String> = (0..4).map(|i| engine_reply("count", "s", &TB, if i == 0 { "" } else { "ALL" })).collect();
    let (_, engine_backend, orch) = scripted(agent, engine, mode);
    (orch.run_task("t", &mut mock_session("r")), engine_backend)
}

fn requests_dropped(engine: &ScriptedBackend) -> Result<usize, String> {
    let prompts = engine.prompts();
    for (i, p) in prompts.iter().enumerate().skip(1) {
        let text: String = p.iter().map(|m| m.content.as_str()).collect();
        ensure!(text.contains("<update_requirement>\nNONE\n</update_requirement>"), "engine prompt {i} carries a request");
    }
    Ok(prompts.len().saturating_sub(1))
}

fn criterion_7() -> Check {
    let (when, _) = twelve_steps(AblationMode::without_when(5));
    ensure!(when.status == RunStatus::Finished, "w/o-when: {:?}", when.status);
    ensure!(stage_sizes(&when) == [5, 5, 2], "w/o-when stages {:?}", stage_sizes(&when));
    ensure!(
        when.stages[..2].iter().all(|s| s.trace.terminal.kind == OutcomeKind::Reconfigured && s.trace.terminal.forced),
        "w/o-when boundaries not forced"
    );

    let s = Scenario::builtin("case1_nasa").map_err(|e| e.to_string())?;
    let run_case = |mode: AblationMode| {
        let pool = s.pool().expect("pool");
        let agent = Arc::new(ScriptedBackend::new("a", s.agent.clone()).with_assertions(false));
        let engine = Arc::new(ScriptedBackend::new("e", s.engine.clone()).with_assertions(false));
        let orch = Orchestrator::new(agent, engine.clone(), pool.clone(), ToolRegistry::mock(&pool))
            .with_mode(mode)
            .with_toolbox_minimum(!s.relax_toolbox_minimum);
        (orch.run_task(&s.task, &mut s.session()), engine)
    };
    let (how, how_engine) = run_case(AblationMode::without_how());
    ensure!(how.status == RunStatus::Finished, "w/o-how: {:?}", how.status);
    let dropped = requests_dropped(&how_engine)?;
    ensure!(dropped == 4, "w/o-how made {dropped} reconfiguration calls");
    let (_, full_engine) = run_case(AblationMode::full());
    ensure!(requests_dropped(&full_engine).is_err(), "full mode never forwards a request");

    let (both, both_engine) = twelve_steps(AblationMode::without_both(5));
    ensure!(stage_sizes(&both) == [5, 5, 2], "w/o-both stages {:?}", stage_sizes(&both));
    requests_dropped(&both_engine)?;

    let case2 = Scenario::builtin("case2_asean").map_err(|e| e.to_string())?;
    let full_pool = case2.pool().map_err(|e| e.to_string())?.task_tool_names();
    for c in Component::ALL {
        let orch = case2
            .orchestrator(AblationMode::disabling([c]), RunLimits::default(), ContextBudget::default())
            .map_err(|e| e.to_string())?;
        let t = orch.run_task(&case2.task, &mut case2.session());
        ensure!(t.stage_count() > 1, "{}: only {} stage", c.as_str(), t.stage_count());
        for st in &t.stages {
            let cfg = &st.config;
            let pinned = match c {
                Component::SubGoal => cfg.sub_goal == case2.task,
                Component::Strategy => cfg.strategy == GENERIC_STRATEGY,
                Component::Toolbox => cfg.toolbox == full_pool,
                Component::Context => cfg.knowledge.is_empty(),
            };
            ensure!(pinned, "{} not pinned in stage {}", c.as_str(), cfg.stage_index + 1);
        }
    }
    Ok("interval stages [5, 5, 2], requests dropped, all four components pinned".into())
}

const FRAGMENTS: [&str; 12] = [
    "</tool_response>",
    "<tool_response>",
    "<\\/tool_response>",
    "<\\\\/tool_response>",
    "</tool_call>",
    "\\",
    "/",
    "<",
    ">",
    "\n",
    "é中",
    "tool_response",
];

fn random_observation(rng: &mut StdRng) -> String {
    let mut s = String::new();
    for _ in 0..rng.random_range(0..12) {
        if rng.random_bool(0.6) {
            s.push_str(FRAGMENTS[rng.random_range(0..FRAGMENTS.len())]);
        } else {
            let len = rng.random_range(0..8);
            s.extend((0..len).map(|_| rng.random_range(' '..='~')));
        }
    }
    s
}

fn reconfigure_payloads() -> Vec<Value> {
    let mut out = Vec::new();
    let contents = ["sub_goal", "toolbox", "knowledge", "execution_strategy"];
    let detail_sets: [&[&str]; 5] = [
        &[],
        &["toolbox_requirements"],
        &["knowledge_requirements"],
        &["execution_strategy_requirements"],
        &["toolbox_requirements", "knowledge_requirements", "execution_strategy_requirements"],
    ];
    for c in contents {
        for details in detail_sets {
            let mut v = json!({
                "execution_summary": "searched twice",
                "new_sub_goal": "find the date",
                "update_reason": "page lacked it",
                "update_content": c,
            });
            if !details.is_empty() {
                let map: serde_json::Map<String, Value> =
                    details.iter().map(|k| (k.to_string(), json!("something"))).collect();
                v["additional_details"] = Value::Object(map);
            }
            out.push(v);
        }
    }
    out
}

fn mutants(payload: &Value) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    for key in ["execution_summary", "new_sub_goal", "update_reason", "update_content"] {
        let mut m = payload.clone();
        m.as_object_mut().unwrap().remove(key);
        out.push((format!("missing {key}"), m));
        for bad in [json!(7), json!(null), json!(["x"]), json!(true)] {
            let mut m = payload.clone();
            m[key] = bad.clone();
            out.push((format!("{key} = {bad}"), m));
        }
    }
    for bad in ["everything", "Sub_Goal", ""] {
        let mut m = payload.clone();
        m["update_content"] = json!(bad);
        out.push((format!("update_content = {bad:?}"), m));
    }
    let mut m = payload.clone();
    m["additional_details"] = json!("text");
    out.push(("additional_details as string".into(), m));
    out
}

fn criterion_8() -> Check {
    let mut rng = StdRng::seed_from_u64(8);
    let mut collisions = 0;
    for i in 0..10_000 {
        let obs = random_observation(&mut rng);
        collisions += usize::from(obs.contains("</tool_response>") || obs.contains("<\\/tool_response>"));
        let back = parse_tool_response(&render_tool_response(&obs)).map_err(|e| format!("case {i}: {e}"))?;
        ensure!(back == obs, "case {i}: {obs:?} came back as {back:?}");
    }
    ensure!(collisions > 1000, "only {collisions} colliding observations");

    for name in ["case1_nasa", "case2_asean"] {
        let (t, _) = replay(name)?;
        let back = load(&persist(&t)).map_err(|e| format!("{name}: {e}"))?;
        ensure!(back == t, "{name}: persist/load changed the trajectory");
        ensure!(persist(&back) == persist(&t), "{name}: second persist differs");
    }

    let pool = GlobalToolPool::default_pool();
    let schema = pool.reconfigure_schema();
    let (mut accepted, mut rejected) = (0, 0);
    for payload in reconfigure_payloads() {
        let call = ToolCall::new("reconfigure", payload.clone());
        validate_call(&call, schema).map_err(|e| format!("rejected {payload}: {e}"))?;
        ReconfigRequest::from_reconfigure_arguments(&payload).map_err(|e| format!("request {payload}: {e}"))?;
        accepted += 1;
        for (what, m) in mutants(&payload) {
            ensure!(
                validate_call(&ToolCall::new("reconfigure", m), schema).is_err(),
                "accepted mutant ({what}) of {payload}"
            );
            rejected += 1;
        }
    }
    Ok(format!("10000 round trips ({collisions} with tag collisions), {accepted} payloads accepted, {rejected} mutants rejected"))
}

// A single-loop ReAct agent built directly from the prompt renderer and
// the tool registry.
fn reference_react(
    task: &str,
    pool: &GlobalToolPool,
    backend: &dyn ChatBackend,
    session: &mut ToolSession,
) -> Result<(Vec<Step>, String), String> {
    let config = StageConfiguration {
        stage_index: 0,
        sub_goal: task.to_string(),
        strategy: GENERIC_STRATEGY.to_string(),
        toolbox: pool.task_tool_names(),
        knowledge: String::new(),
    };
    let mut schemas: Vec<_> = pool.task_tools().cloned().collect();
    schemas.push(pool.finish_schema().clone());
    let bundle = render_inference_prompt(&PromptTemplates::builtin(), task, &config, &schemas).map_err(|e| e.to_string())?;
    let registry = ToolRegistry::mock(pool);
    let mut steps: Vec<Step> = Vec::new();
    loop {
        let mut messages = bundle.messages();
        for s in &steps {
            messages.extend(s.messages());
        }
        let c = backend.complete(&messages, &SamplingParams::runtime()).map_err(|e| e.to_string())?;
        let turn = parse_assistant_turn(&c.text).map_err(|e| e.to_string())?;
        if turn.call.name == FINISH_TOOL {
            return Ok((steps, turn.call.arg_str("final_result").unwrap_or_default().to_string()));
        }
        let observation = registry.dispatch(&turn.call, session);
        steps.push(Step { thought: turn.thought, call: turn.call, observation, raw: Some(c.text) });
    }
}

fn criterion_9() -> Check {
    let script: Vec<String> = vec![
        search("first"),
        task_turn("open it", "visit", json!({"url": ["https://example.org/a"], "goal": "read"})),
        task_turn("compute", "code_interpreter", json!({"code": "print(1+1)"})),
        task_turn("bad args", "search", json!({"query": 5})),
        search("second"),
        finish_turn("done", "2", &["search", "visit", "code_interpreter"]),
    ];
    let env = MockScript {
        rules: vec![
            MockRule::new("search", "result one").containing("first"),
            MockRule::new("visit", "page body"),
            MockRule::new("code_interpreter", "2"),
        ],
        default_body: "nothing found".into(),
    };
    let pool = GlobalToolPool::default_pool();
    let task = "What is one plus one?";

    let reference = ScriptedBackend::new("ref", script.iter().cloned().map(ScriptEntry::text).collect());
    let mut ref_session = ToolSession::mock(MockEnvironment::new(env.clone()));
    let (ref_steps, ref_answer) = reference_react(task, &pool, &reference, &mut ref_session)?;

    let (agent, engine, orch) = scripted(script, vec![], AblationMode::static_baseline());
    let t = orch.run_task(task, &mut ToolSession::mock(MockEnvironment::new(env)));
    ensure!(t.status == RunStatus::Finished, "static run {:?} {:?}", t.status, t.reason);
    ensure!(t.stage_count() == 1 && engine.calls() == 0, "static run touched the engine");
    ensure!(t.final_result.as_deref() == Some(ref_answer.as_str()), "answers differ");
    let ours = serde_json::to_string(&t.stages[0].trace.steps).unwrap();
    let theirs = serde_json::to_string(&ref_steps).unwrap();
    ensure!(ours == theirs, "step traces differ:\n{ours}\n{theirs}");
    ensure!(agent.prompts() == reference.prompts(), "agent prompts differ");
    Ok(format!("{} steps and {} prompts identical", ref_steps.len(), reference.prompts().len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("golden run: astronaut lookup", criterion_1),
        ("golden run: capital cities", criterion_2),
        ("context budget and stage isolation", criterion_3),
        ("run limits", criterion_4),
        ("label propagation and export", criterion_5),
        ("KTO loss", criterion_6),
        ("ablation switches", criterion_7),
        ("codec and ledger round trips", criterion_8),
        ("static baseline equals plain ReAct", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
