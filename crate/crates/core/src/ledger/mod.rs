//! Trajectory records, labels, storage and dataset export.

pub mod kto;
mod record;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::llm::ChatMessage;

pub use kto::{default_value, kto_loss, kto_loss_with, logistic, KtoParams, LogprobBundle};
pub use record::{
    CompletionStatus, FinishPayload, Outcome, OutcomeKind, PromptEvent, RunMetadata, RunMetrics,
    RunStatus, StageOutcome, StageRecord, StageTrace, Trajectory, LEDGER_VERSION,
};

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("trajectory `{0}` has no outcome label")]
    UnlabeledTrajectory(String),
    #[error("trajectory `{0}` lacks log-probabilities")]
    MissingLogprobs(String),
    #[error("record version {found:?} is not supported (expected {LEDGER_VERSION})")]
    SchemaVersionMismatch { found: Option<u64> },
    #[error("corrupt record at line {line}: {detail}")]
    CorruptRecord { line: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LedgerError + '_ {
    move |source| LedgerError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Module {
    Inference,
    Reconfiguration,
}

impl Module {
    pub fn as_str(self) -> &'static str {
        match self {
            Module::Inference => "inference",
            Module::Reconfiguration => "reconfiguration",
        }
    }
}

/// One fine-tuning example for either module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub module: Module,
    pub prompt: Vec<ChatMessage>,
    pub target: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
    pub trajectory_id: String,
    pub stage_index: usize,
}

/// The stage's agent output: each emitted turn followed by its tool
/// response, then the terminal call if the model made one.
pub fn inference_target(stage: &StageRecord) -> Vec<ChatMessage> {
    let mut out: Vec<ChatMessage> = stage.trace.steps.iter().flat_map(|s| s.messages()).collect();
    if let Some(raw) = &stage.trace.terminal.raw {
        out.push(ChatMessage::assistant(raw.clone()));
    }
    out
}

/// Gives every stage trace and every configuration of `t` its label.
pub fn assign_labels(t: &Trajectory) -> Result<Vec<TrainingSample>, LedgerError> {
    let y = t
        .outcome
        .label()
        .ok_or_else(|| LedgerError::UnlabeledTrajectory(t.id.clone()))?;
    let mut out = Vec::with_capacity(2 * t.stages.len());
    for stage in &t.stages {
        out.push(TrainingSample {
            module: Module::Inference,
            prompt: stage.trace.prompt.clone(),
            target: inference_target(stage),
            label: Some(y),
            trajectory_id: t.id.clone(),
            stage_index: stage.config.stage_index,
        });
        out.push(TrainingSample {
            module: Module::Reconfiguration,
            prompt: stage.engine.prompt.clone(),
            target: vec![ChatMessage::assistant(stage.engine.output.to_json())],
            label: Some(y),
            trajectory_id: t.id.clone(),
            stage_index: stage.config.stage_index,
        });
    }
    Ok(out)
}

/// Successful trajectories, in input order.
pub fn filter_rft(trajectories: &[Trajectory]) -> Vec<&Trajectory> {
    trajectories
        .iter()
        .filter(|t| t.outcome == Outcome::Success)
        .collect()
}

pub fn trajectory_logprob(t: &Trajectory) -> Result<f64, LedgerError> {
    t.logprob_bundle
        .as_ref()
        .map(LogprobBundle::total)
        .ok_or_else(|| LedgerError::MissingLogprobs(t.id.clone()))
}

/// One JSON line, no trailing newline.
pub fn persist(t: &Trajectory) -> String {
    serde_json::to_string(t).expect("trajectory serializes")
}

fn load_line(line: &str, lineno: usize) -> Result<Trajectory, LedgerError> {
    let value: Value = serde_json::from_str(line).map_err(|e| LedgerError::CorruptRecord {
        line: lineno,
        detail: e.to_string(),
    })?;
    let version = value.get("version").and_then(Value::as_u64);
    if version != Some(u64::from(LEDGER_VERSION)) {
        return Err(LedgerError::SchemaVersionMismatch { found: version });
    }
    serde_json::from_value(value).map_err(|e| LedgerError::CorruptRecord {
        line: lineno,
        detail: e.to_string(),
    })
}

pub fn load(record: &str) -> Result<Trajectory, LedgerError> {
    load_line(record.trim_end(), 1)
}

/// Appends one record with a single write, so concurrent appenders do not
/// interleave within a line.
pub fn append_jsonl(path: &Path, t: &Trajectory) -> Result<(), LedgerError> {
    let mut line = persist(t);
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(line.as_bytes()).map_err(io_err(path))
}

pub fn write_jsonl(path: &Path, trajectories: &[Trajectory]) -> Result<(), LedgerError> {
    let mut f = File::create(path).map_err(io_err(path))?;
    for t in trajectories {
        writeln!(f, "{}", persist(t)).map_err(io_err(path))?;
    }
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Trajectory>, LedgerError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(load_line(&line, i + 1)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Sft,
    Kto,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportReport {
    pub inference_path: PathBuf,
    pub reconfiguration_path: PathBuf,
    pub inference_records: usize,
    pub reconfiguration_records: usize,
    pub label_histogram: IndexMap<String, usize>,
}

impl ExportReport {
    pub fn is_empty(&self) -> bool {
        self.inference_records == 0 && self.reconfiguration_records == 0
    }
}

/// Builds the per-module samples for `format` without touching disk.
pub fn dataset_samples(
    trajectories: &[Trajectory],
    format: ExportFormat,
) -> Result<Vec<TrainingSample>, LedgerError> {
    let mut out = Vec::new();
    match format {
        ExportFormat::Sft => {
            for t in filter_rft(trajectories) {
                out.extend(assign_labels(t)?.into_iter().map(|mut s| {
                    s.label = None;
                    s
                }));
            }
        }
        ExportFormat::Kto => {
            for t in trajectories {
                out.extend(assign_labels(t)?);
            }
        }
    }
    Ok(out)
}

/// Writes `{prefix}_inference.jsonl` and `{prefix}_reconfiguration.jsonl`
/// into `dir`.
pub fn export_datasets(
    trajectories: &[Trajectory],
    format: ExportFormat,
    dir: &Path,
    prefix: &str,
) -> Result<ExportReport, LedgerError> {
    let samples = dataset_samples(trajectories, format)?;
    let inference_path = dir.join(format!("{prefix}_inference.jsonl"));
    let reconfiguration_path = dir.join(format!("{prefix}_reconfiguration.jsonl"));
    let mut inf = File::create(&inference_path).map_err(io_err(&inference_path))?;
    let mut rec = File::create(&reconfiguration_path).map_err(io_err(&reconfiguration_path))?;
    let mut report = ExportReport {
        inference_path: inference_path.clone(),
        reconfiguration_path: reconfiguration_path.clone(),
        inference_records: 0,
        reconfiguration_records: 0,
        label_histogram: IndexMap::new(),
    };
    for s in &samples {
        let line = serde_json::to_string(s).expect("sample serializes");
        let (file, path, count) = match s.module {
            Module::Inference => (&mut inf, &inference_path, &mut report.inference_records),
            Module::Reconfiguration => (&mut rec, &reconfiguration_path, &mut report.reconfiguration_records),
        };
        writeln!(file, "{line}").map_err(io_err(path))?;
        *count += 1;
        if let (Module::Inference, Some(y)) = (s.module, s.label) {
            *report.label_histogram.entry(u8::from(y).to_string()).or_default() += 1;
        }
    }
    if report.is_empty() {
        log::warn!("export produced an empty dataset");
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolStat {
    /// Share of trajectories whose stage toolboxes ever included the tool.
    pub trajectory_frequency: f64,
    /// Share of all steps that invoked the tool.
    pub step_frequency: f64,
}

/// Per-tool selection and invocation frequencies. `tools` fixes the rows;
/// tools seen in the data but not listed are appended.
pub fn tool_usage_stats(trajectories: &[Trajectory], tools: &[String]) -> IndexMap<String, ToolStat> {
    let mut selected: IndexMap<String, usize> = tools.iter().map(|t| (t.clone(), 0)).collect();
    let mut invoked: IndexMap<String, usize> = tools.iter().map(|t| (t.clone(), 0)).collect();
    let mut total_steps = 0usize;
    for t in trajectories {
        let mut union: Vec<&str> = Vec::new();
        for stage in &t.stages {
            for name in &stage.config.toolbox {
                if !union.contains(&name.as_str()) {
                    union.push(name);
                }
            }
        }
        for name in union {
            *selected.entry(name.to_string()).or_default() += 1;
        }
        for step in t.steps() {
            total_steps += 1;
            *invoked.entry(step.call.name.clone()).or_default() += 1;
        }
    }
    let n = trajectories.len();
    let ratio = |k: usize, d: usize| if d == 0 { 0.0 } else { k as f64 / d as f64 };
    let mut names: Vec<String> = selected.keys().cloned().collect();
    for k in invoked.keys() {
        if !names.contains(k) {
            names.push(k.clone());
        }
    }
    names
        .into_iter()
        .map(|name| {
            let stat = ToolStat {
                trajectory_frequency: ratio(selected.get(&name).copied().unwrap_or(0), n),
                step_frequency: ratio(invoked.get(&name).copied().unwrap_or(0), total_steps),
            };
            (name, stat)
        })
        .collect()
}
