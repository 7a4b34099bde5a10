mod config;
mod report;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stagewise::ledger::{self, ExportFormat, LedgerError};
use stagewise::prompt::PromptTemplates;
use stagewise::scenario::{Scenario, ScenarioError};
use stagewise::tools::ToolSession;
use stagewise::{AblationMode, Component, GlobalToolPool, Orchestrator, Outcome, RunStatus, ToolRegistry, Trajectory};

use config::Config;
use report::MetricsRow;

mod exit {
    pub const CONFIG: u8 = 2;
    pub const UNKNOWN_SCENARIO: u8 = 3;
    pub const BACKEND: u8 = 4;
    pub const ABORTED: u8 = 5;
    pub const LIMIT: u8 = 6;
    pub const ENGINE: u8 = 7;
    pub const DATA: u8 = 8;
}

#[derive(Debug)]
struct Fail {
    code: u8,
    msg: String,
}

impl Fail {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Self { code, msg: msg.into() }
    }
}

impl From<LedgerError> for Fail {
    fn from(e: LedgerError) -> Self {
        let code = match e {
            LedgerError::UnlabeledTrajectory(_) | LedgerError::MissingLogprobs(_) => exit::CONFIG,
            _ => exit::DATA,
        };
        Fail::new(code, e.to_string())
    }
}

impl From<ScenarioError> for Fail {
    fn from(e: ScenarioError) -> Self {
        let code = match e {
            ScenarioError::Unknown(_) => exit::UNKNOWN_SCENARIO,
            ScenarioError::Io(..) => exit::DATA,
            _ => exit::CONFIG,
        };
        Fail::new(code, e.to_string())
    }
}

fn status_code(s: RunStatus) -> u8 {
    match s {
        RunStatus::Finished => 0,
        RunStatus::Aborted => exit::ABORTED,
        RunStatus::ReconfigLimitExceeded | RunStatus::IterationLimitExceeded => exit::LIMIT,
        RunStatus::EngineFailure => exit::ENGINE,
        RunStatus::BackendFailure => exit::BACKEND,
    }
}

/// Self-reconfiguring ReAct agent runtime.
#[derive(Parser)]
#[command(name = "stagewise", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set limits.max_iterations=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Ablation mode: full, static, w/o-when[@n], w/o-how, w/o-both[@n],
    /// w/o-<component>[+<component>...], comma separated.
    #[arg(long)]
    mode: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<(Config, AblationMode), Fail> {
        let cfg = Config::load(self.config.as_deref(), &self.overrides).map_err(|e| Fail::new(exit::CONFIG, e))?;
        let name = self.mode.as_deref().or(cfg.mode.as_deref()).unwrap_or("full");
        let mode = AblationMode::from_name(name).map_err(|e| Fail::new(exit::CONFIG, e))?;
        Ok((cfg, mode))
    }
}

#[derive(Args)]
struct OutArgs {
    /// Append the trajectory to this JSONL log.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Blank timestamps and model ids in the written record.
    #[arg(long)]
    normalize: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Sft,
    Kto,
}

#[derive(Subcommand)]
enum Command {
    /// Run one task against live endpoints, or a scenario with mocks.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Task text for a live run.
        #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
        task: Option<String>,
        /// Built-in scenario name or scenario file.
        #[arg(long)]
        scenario: Option<String>,
    },
    /// Replay a scripted scenario and judge its answer.
    Replay {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        scenario: String,
    },
    /// Run scenarios under every ablation mode and print one JSON row per run.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        scenario: Vec<String>,
        /// Steps per stage for the fixed-interval modes.
        #[arg(long, default_value_t = stagewise::orchestrator::DEFAULT_INTERVAL)]
        interval: usize,
        /// Parallel runs.
        #[arg(long, default_value_t = 4)]
        jobs: usize,
        /// Also write the rows to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print trajectories stage by stage.
    Inspect {
        log: PathBuf,
        /// Only the trajectory at this position (0-based).
        #[arg(long)]
        index: Option<usize>,
    },
    /// Write per-module fine-tuning datasets.
    Export {
        log: PathBuf,
        #[arg(long, value_enum)]
        format: FormatArg,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "stagewise")]
        prefix: String,
        /// JSON object mapping trajectory id to a 0/1 or boolean label.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Tool selection and invocation frequencies.
    Stats {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

fn write_record(out: &OutArgs, t: &Trajectory) -> Result<(), Fail> {
    if let Some(path) = &out.out {
        let rec = if out.normalize { t.normalized() } else { t.clone() };
        ledger::append_jsonl(path, &rec)?;
    }
    Ok(())
}

fn report_run(t: &Trajectory) -> u8 {
    match &t.final_result {
        Some(f) => println!("final: {f}"),
        None => println!("final: -"),
    }
    if let Some(r) = &t.reason {
        eprintln!("stopped: {r}");
    }
    println!("{}", report::summary_line(t));
    status_code(t.status)
}

fn templates(cfg: &Config) -> Result<PromptTemplates, Fail> {
    match &cfg.prompts_dir {
        Some(dir) => PromptTemplates::load_dir(dir).map_err(|e| Fail::new(exit::CONFIG, e.to_string())),
        None => Ok(PromptTemplates::builtin()),
    }
}

fn scenario_run(s: &Scenario, cfg: &Config, mode: AblationMode) -> Result<Trajectory, Fail> {
    let orch = s
        .orchestrator(mode, cfg.limits.clone(), cfg.context.clone())?
        .with_templates(templates(cfg)?);
    let t = orch.run_task(&s.task, &mut s.session());
    let y = t.status == RunStatus::Finished && s.judge(t.final_result.as_deref());
    Ok(t.labeled(y))
}

fn live_run(task: &str, cfg: &Config, mode: AblationMode) -> Result<Trajectory, Fail> {
    let backend_err = |e: stagewise::BackendError| Fail::new(exit::CONFIG, e.to_string());
    let agent = cfg.agent.backend().map_err(backend_err)?;
    let engine = cfg.engine().backend().map_err(backend_err)?;
    let pool = GlobalToolPool::default_pool();
    let registry = ToolRegistry::live(&pool, &cfg.tools, Some(agent.clone()), cfg.agent.params())
        .map_err(|e| Fail::new(exit::CONFIG, e.to_string()))?;
    let workspace = match &cfg.workspace {
        Some(w) => w.clone(),
        None => std::env::current_dir().map_err(|e| Fail::new(exit::DATA, e.to_string()))?,
    };
    let orch = Orchestrator::new(agent, engine, pool, registry)
        .with_agent_params(cfg.agent.params())
        .with_engine_params(cfg.engine().params())
        .with_templates(templates(cfg)?)
        .with_limits(cfg.limits.clone())
        .with_budget(cfg.context.clone())
        .with_mode(mode);
    Ok(orch.run_task(task, &mut ToolSession::live(workspace)))
}

fn ablation_modes(interval: usize) -> Vec<AblationMode> {
    let mut modes = vec![
        AblationMode::full(),
        AblationMode::without_when(interval),
        AblationMode::without_how(),
        AblationMode::without_both(interval),
    ];
    modes.extend(Component::ALL.map(|c| AblationMode::disabling([c])));
    modes
}

fn ablate(cfg: &Config, names: &[String], interval: usize, jobs: usize, out: Option<&Path>) -> Result<(), Fail> {
    if interval == 0 {
        return Err(Fail::new(exit::CONFIG, "--interval must be positive"));
    }
    if names.is_empty() {
        log::warn!("no scenarios given; the table is empty");
    }
    let scenarios: Vec<Scenario> = names.iter().map(|n| Scenario::resolve(n)).collect::<Result<_, _>>()?;
    let cells: Vec<(&Scenario, AblationMode)> = scenarios
        .iter()
        .flat_map(|s| ablation_modes(interval).into_iter().map(move |m| (s, m)))
        .collect();
    let results: Vec<Mutex<Option<Result<MetricsRow, String>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, cells.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((s, mode)) = cells.get(i) else { break };
                let row = scenario_run(s, cfg, mode.clone())
                    .map(|t| MetricsRow::of(&t))
                    .map_err(|e| e.msg);
                *results[i].lock().unwrap() = Some(row);
            });
        }
    });
    let mut lines = String::new();
    for ((s, mode), cell) in cells.iter().zip(results) {
        let line = match cell.into_inner().unwrap().expect("every cell ran") {
            Ok(row) => serde_json::to_string(&row).expect("row serializes"),
            Err(e) => serde_json::json!({"scenario": s.name, "mode": mode.name(), "error": e}).to_string(),
        };
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    }
    if let Some(path) = out {
        std::fs::write(path, lines).map_err(|e| Fail::new(exit::DATA, format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn read_labels(path: &Path) -> Result<HashMap<String, bool>, Fail> {
    let text = std::fs::read_to_string(path).map_err(|e| Fail::new(exit::DATA, format!("{}: {e}", path.display())))?;
    let map: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| Fail::new(exit::DATA, format!("{}: {e}", path.display())))?;
    map.into_iter()
        .map(|(id, v)| {
            let y = match &v {
                serde_json::Value::Bool(b) => Some(*b),
                serde_json::Value::Number(n) if n.as_u64() == Some(0) => Some(false),
                serde_json::Value::Number(n) if n.as_u64() == Some(1) => Some(true),
                _ => None,
            };
            y.map(|y| (id.clone(), y))
                .ok_or_else(|| Fail::new(exit::DATA, format!("label for `{id}` must be 0, 1, true or false")))
        })
        .collect()
}

fn export(log: &Path, format: FormatArg, dir: &Path, prefix: &str, labels: Option<&Path>) -> Result<(), Fail> {
    let mut ts = ledger::load_jsonl(log)?;
    if let Some(path) = labels {
        let labels = read_labels(path)?;
        for t in &mut ts {
            if let Some(&y) = labels.get(&t.id) {
                t.outcome = Outcome::from_label(y);
            }
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Fail::new(exit::DATA, format!("{}: {e}", dir.display())))?;
    let format = match format {
        FormatArg::Sft => ExportFormat::Sft,
        FormatArg::Kto => ExportFormat::Kto,
    };
    let r = ledger::export_datasets(&ts, format, dir, prefix)?;
    if r.is_empty() {
        eprintln!("warning: empty dataset");
    }
    println!("{} {}", r.inference_path.display(), r.inference_records);
    println!("{} {}", r.reconfiguration_path.display(), r.reconfiguration_records);
    for (label, n) in &r.label_histogram {
        println!("label {label}: {n}");
    }
    Ok(())
}

fn stats(logs: &[PathBuf], json: bool) -> Result<(), Fail> {
    let mut ts = Vec::new();
    for log in logs {
        ts.extend(ledger::load_jsonl(log)?);
    }
    let names = GlobalToolPool::default_pool().task_tool_names();
    let table = ledger::tool_usage_stats(&ts, &names);
    if json {
        println!("{}", serde_json::to_string_pretty(&table).expect("stats serialize"));
    } else {
        println!("{:<20} {:>12} {:>12}", "tool", "selected", "invoked");
        for (name, s) in &table {
            println!("{:<20} {:>12.4} {:>12.4}", name, s.trajectory_frequency, s.step_frequency);
        }
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<u8, Fail> {
    match cmd {
        Command::Run { cfg, out, task, scenario } => {
            let (config, mode) = cfg.load()?;
            let t = match (task, scenario) {
                (_, Some(name)) => scenario_run(&Scenario::resolve(&name)?, &config, mode)?,
                (Some(task), None) => live_run(&task, &config, mode)?,
                (None, None) => unreachable!("clap requires one of --task and --scenario"),
            };
            write_record(&out, &t)?;
            Ok(report_run(&t))
        }
        Command::Replay { cfg, out, scenario } => {
            let (config, mode) = cfg.load()?;
            let t = scenario_run(&Scenario::resolve(&scenario)?, &config, mode)?;
            write_record(&out, &t)?;
            Ok(report_run(&t))
        }
        Command::Ablate { cfg, scenario, interval, jobs, out } => {
            let (config, _) = cfg.load()?;
            ablate(&config, &scenario, interval, jobs, out.as_deref())?;
            Ok(0)
        }
        Command::Inspect { log, index } => {
            let ts = ledger::load_jsonl(&log)?;
            let picked: Vec<&Trajectory> = match index {
                Some(i) => vec![ts
                    .get(i)
                    .ok_or_else(|| Fail::new(exit::CONFIG, format!("log has {} trajectories", ts.len())))?],
                None => ts.iter().collect(),
            };
            let views: Vec<String> = picked.into_iter().map(report::inspect).collect();
            print!("{}", views.join("\n"));
            Ok(0)
        }
        Command::Export { log, format, out, prefix, labels } => {
            export(&log, format, &out, &prefix, labels.as_deref())?;
            Ok(0)
        }
        Command::Stats { logs, json } => {
            stats(&logs, json)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse().command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
