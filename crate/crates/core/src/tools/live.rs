//! HTTP- and model-backed tools.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::Url;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{fan_out, AdapterKind, ToolAdapter, ToolError, ToolSession};
use crate::codec::ToolCall;
use crate::llm::{ChatBackend, ChatMessage, SamplingParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiveToolConfig {
    /// SearxNG-compatible base URL; `GET {base}/search?q=..&format=json`.
    pub search_url: Option<String>,
    /// Reader endpoint; the page URL is appended to it.
    pub reader_url: Option<String>,
    pub python: String,
    pub max_results: usize,
    /// Page or file characters handed to the extraction model.
    pub extract_chars: usize,
}

impl Default for LiveToolConfig {
    fn default() -> Self {
        Self {
            search_url: None,
            reader_url: None,
            python: "python3".into(),
            max_results: 10,
            extract_chars: 60_000,
        }
    }
}

fn http_client(tool: &str) -> Result<Client, ToolError> {
    Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .map_err(|e| ToolError::failure(tool, e.to_string()))
}

fn string_list(v: Option<&Value>) -> Vec<String> {
    match v {
        Some(Value::String(s)) => vec![s.clone()],
        Some(Value::Array(a)) => a.iter().filter_map(Value::as_str).map(str::to_string).collect(),
        _ => Vec::new(),
    }
}

// Joins per-item results; fails only when every item failed.
fn assemble(tool: &str, parts: Vec<Result<String, String>>) -> Result<String, ToolError> {
    if !parts.is_empty() && parts.iter().all(Result::is_err) {
        let errs: Vec<String> = parts.into_iter().filter_map(Result::err).collect();
        return Err(ToolError::failure(tool, errs.join("; ")));
    }
    Ok(parts
        .into_iter()
        .map(|p| p.unwrap_or_else(|e| format!("Error: {e}")))
        .collect::<Vec<_>>()
        .join("\n=======\n"))
}

pub struct SearchTool {
    base: String,
    max_results: usize,
    client: Client,
}

impl SearchTool {
    pub fn new(base: &str, max_results: usize) -> Result<Self, ToolError> {
        Ok(Self {
            base: base.trim_end_matches('/').to_string(),
            max_results,
            client: http_client("search")?,
        })
    }

    fn one(&self, query: &str) -> Result<String, String> {
        let url = Url::parse_with_params(
            &format!("{}/search", self.base),
            &[("q", query), ("format", "json")],
        )
        .map_err(|e| e.to_string())?;
        let resp = self.client.get(url).send().map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("search service returned HTTP {}", resp.status()));
        }
        let body: Value = resp.json().map_err(|e| e.to_string())?;
        let results = body.get("results").and_then(Value::as_array).cloned().unwrap_or_default();
        if results.is_empty() {
            return Ok(format!("No results found for '{query}'."));
        }
        let mut out = format!("A search for '{query}' found {} results:\n", results.len().min(self.max_results));
        for (i, r) in results.iter().take(self.max_results).enumerate() {
            let field = |k: &str| r.get(k).and_then(Value::as_str).unwrap_or("").trim().to_string();
            out.push_str(&format!("\n{}. [{}]({})\n{}\n", i + 1, field("title"), field("url"), field("content")));
        }
        Ok(out.trim_end().to_string())
    }
}

impl ToolAdapter for SearchTool {
    fn kind(&self) -> AdapterKind {
        AdapterKind::Live
    }

    fn execute(&self, call: &ToolCall, _: &mut ToolSession) -> Result<String, ToolError> {
        let queries = string_list(call.arguments.get("query"));
        assemble(&call.name, fan_out(&queries, |q| self.one(q)))
    }
}

fn extract(
    backend: &dyn ChatBackend,
    params: &SamplingParams,
    source: &str,
    content: &str,
    goal: &str,
) -> Result<String, String> {
    let messages = [
        ChatMessage::system(
            "You read a document on behalf of a research agent. Quote the passages that bear on \
             the user's goal under \"Evidence:\", then give a short answer under \"Summary:\". \
             If nothing is relevant, say so.",
        ),
        ChatMessage::user(format!("Document ({source}):\n{content}\n\nUser goal: {goal}")),
    ];
    let completion = backend.complete(&messages, params).map_err(|e| e.to_string())?;
    Ok(format!(
        "The useful information in {source} for user goal {goal} as follows:\n\n{}",
        completion.text.trim()
    ))
}

fn clip(text: &str, max_chars: usize) -> &str {
    match text.char_indices().nth(max_chars) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

/// Fetches pages through a reader endpoint and extracts goal-relevant text
/// with the chat backend. Extraction calls are not part of the agent's
/// iteration budget.
pub struct VisitTool {
    reader: String,
    backend: Arc<dyn ChatBackend>,
    params: SamplingParams,
    max_chars: usize,
    client: Client,
}

impl VisitTool {
    pub fn new(
        reader: &str,
        backend: Arc<dyn ChatBackend>,
        params: SamplingParams,
        max_chars: usize,
    ) -> Result<Self, ToolError> {
        Ok(Self {
            reader: reader.to_string(),
            backend,
            params,
            max_chars,
            client: http_client("visit")?,
        })
    }

    fn one(&self, url: &str, goal: &str) -> Result<String, String> {
        let resp = self
            .client
            .get(format!("{}{url}", self.reader))
            .send()
            .map_err(|e| format!("{url}: {e}"))?;
        if !resp.status().is_success() {
            return Err(format!("{url}: HTTP {}", resp.status()));
        }
        let page = resp.text().map_err(|e| e.to_string())?;
        extract(self.backend.as_ref(), &self.params, url, clip(&page, self.max_chars), goal)
    }
}

impl ToolAdapter for VisitTool {
    fn kind(&self) -> AdapterKind {
        AdapterKind::Live
    }

    fn execute(&self, call: &ToolCall, _: &mut ToolSession) -> Result<String, ToolError> {
        let urls = string_list(call.arguments.get("url"));
        let goal = call.arg_str("goal").unwrap_or_default();
        assemble(&call.name, fan_out(&urls, |u| self.one(u, goal)))
    }
}

const IMAGE_EXTS: &[&str] = &["png", "jpg", "jpeg", "gif", "bmp", "webp", "tiff"];

/// Reads a text file from the workspace and extracts what the goal asks for.
pub struct FileAnalyzerTool {
    backend: Arc<dyn ChatBackend>,
    params: SamplingParams,
    max_chars: usize,
}

impl FileAnalyzerTool {
    pub fn new(backend: Arc<dyn ChatBackend>, params: SamplingParams, max_chars: usize) -> Self {
        Self { backend, params, max_chars }
    }
}

impl ToolAdapter for FileAnalyzerTool {
    fn kind(&self) -> AdapterKind {
        AdapterKind::Live
    }

    fn execute(&self, call: &ToolCall, session: &mut ToolSession) -> Result<String, ToolError> {
        let raw = call.arg_str("file_path").unwrap_or_default();
        let goal = call.arg_str("goal").unwrap_or_default();
        let path = if Path::new(raw).is_absolute() {
            Path::new(raw).to_path_buf()
        } else {
            session.workspace.join(raw)
        };
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        if IMAGE_EXTS.contains(&ext.as_str()) {
            return Err(ToolError::failure(&call.name, "image analysis needs a vision model, none is configured"));
        }
        let bytes = std::fs::read(&path)
            .map_err(|e| ToolError::failure(&call.name, format!("cannot read {}: {e}", path.display())))?;
        let text = String::from_utf8_lossy(&bytes);
        extract(self.backend.as_ref(), &self.params, raw, clip(&text, self.max_chars), goal)
            .map_err(|e| ToolError::failure(&call.name, e))
    }
}
