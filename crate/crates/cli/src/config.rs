//! The TOML run configuration and `--set` overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use stagewise::llm::{BackendError, ChatBackend, OpenAiBackend, RetryingBackend, SamplingParams};
use stagewise::tools::LiveToolConfig;
use stagewise::{ContextBudget, RunLimits};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Endpoint {
    /// OpenAI-compatible base URL, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    /// Environment variable holding the API key; unset means no auth.
    pub api_key_env: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u32,
    pub logprobs: bool,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for Endpoint {
    fn default() -> Self {
        let p = SamplingParams::runtime();
        Self {
            base_url: "http://localhost:8000/v1".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            model: String::new(),
            temperature: p.temperature,
            top_p: p.top_p,
            max_output_tokens: p.max_output_tokens,
            logprobs: false,
            timeout_secs: 600,
            max_retries: 3,
        }
    }
}

impl Endpoint {
    pub fn params(&self) -> SamplingParams {
        SamplingParams {
            temperature: self.temperature,
            top_p: self.top_p,
            max_output_tokens: self.max_output_tokens,
            model_id: self.model.clone(),
        }
    }

    pub fn backend(&self) -> Result<Arc<dyn ChatBackend>, BackendError> {
        let key = self.api_key_env.as_deref().and_then(|v| std::env::var(v).ok());
        let client = OpenAiBackend::new(self.base_url.clone(), key)?
            .with_logprobs(self.logprobs)
            .with_timeout(Duration::from_secs(self.timeout_secs))?;
        Ok(Arc::new(RetryingBackend::new(client).with_max_retries(self.max_retries)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub agent: Endpoint,
    /// Defaults to the agent endpoint.
    pub engine: Option<Endpoint>,
    pub limits: RunLimits,
    pub context: ContextBudget,
    pub tools: LiveToolConfig,
    /// Working directory for file and shell tools.
    pub workspace: Option<PathBuf>,
    /// Directory of prompt template overrides.
    pub prompts_dir: Option<PathBuf>,
    /// Ablation mode name; `--mode` wins.
    pub mode: Option<String>,
}

impl Config {
    pub fn engine(&self) -> &Endpoint {
        self.engine.as_ref().unwrap_or(&self.agent)
    }

    /// Reads `path` (if any), applies `key=value` overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, String> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                text.parse::<toml::Table>().map_err(|e| format!("{}: {e}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| e.to_string())?;
        cfg.context.check()?;
        cfg.agent.params().check().map_err(|e| format!("agent: {e}"))?;
        cfg.engine().params().check().map_err(|e| format!("engine: {e}"))?;
        Ok(cfg)
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a
/// plain string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), String> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override `{spec}` is not key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(format!("bad override key `{key}`"));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| format!("override `{key}`: `{p}` is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
