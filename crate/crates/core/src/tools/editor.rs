//! File viewing and editing with per-session undo.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

/// Undo stacks keyed by file.
#[derive(Debug, Clone, Default)]
pub struct EditorState {
    history: HashMap<PathBuf, Vec<String>>,
}

const SNIPPET_CONTEXT: usize = 4;

fn numbered(lines: &[&str], first: usize) -> String {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{:6}\t{l}", first + i))
        .collect::<Vec<_>>()
        .join("\n")
}

fn snippet(text: &str, center: usize, span: usize) -> String {
    let lines: Vec<&str> = text.split('\n').collect();
    let start = center.saturating_sub(SNIPPET_CONTEXT);
    let end = (center + span + SNIPPET_CONTEXT).min(lines.len());
    numbered(&lines[start..end], start + 1)
}

fn arg<'a>(args: &'a Value, key: &str) -> Option<&'a str> {
    args.get(key).and_then(Value::as_str)
}

impl EditorState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs one command. Errors come back as the message for the agent.
    pub fn execute(&mut self, workspace: &Path, args: &Value) -> Result<String, String> {
        let command = arg(args, "command").ok_or("missing `command`")?;
        let raw = arg(args, "path").ok_or("missing `path`")?;
        let path = if Path::new(raw).is_absolute() {
            PathBuf::from(raw)
        } else {
            workspace.join(raw)
        };
        match command {
            "view" => self.view(&path, args.get("view_range")),
            "create" => self.create(&path, arg(args, "file_text").ok_or("`create` needs `file_text`")?),
            "str_replace" => self.str_replace(
                &path,
                arg(args, "old_str").ok_or("`str_replace` needs `old_str`")?,
                arg(args, "new_str").unwrap_or(""),
            ),
            "insert" => self.insert(
                &path,
                args.get("insert_line")
                    .and_then(Value::as_i64)
                    .ok_or("`insert` needs `insert_line`")?,
                arg(args, "new_str").ok_or("`insert` needs `new_str`")?,
            ),
            "undo_edit" => self.undo(&path),
            other => Err(format!("unknown command `{other}`")),
        }
    }

    fn read(path: &Path) -> Result<String, String> {
        fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))
    }

    fn write(&mut self, path: &Path, old: Option<String>, new: &str) -> Result<(), String> {
        fs::write(path, new).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
        if let Some(old) = old {
            self.history.entry(path.to_path_buf()).or_default().push(old);
        }
        Ok(())
    }

    fn view(&self, path: &Path, range: Option<&Value>) -> Result<String, String> {
        if path.is_dir() {
            let mut entries = Vec::new();
            list_dir(path, 0, &mut entries);
            entries.sort();
            return Ok(format!(
                "Files and directories up to 2 levels deep in {}:\n{}",
                path.display(),
                entries.join("\n")
            ));
        }
        let text = Self::read(path)?;
        let lines: Vec<&str> = text.split('\n').collect();
        let (start, end) = match range.and_then(Value::as_array) {
            None => (1, lines.len()),
            Some(r) => {
                let nums: Vec<i64> = r.iter().filter_map(Value::as_i64).collect();
                let [s, e] = nums[..] else {
                    return Err("`view_range` must hold two integers".into());
                };
                let e = if e == -1 { lines.len() as i64 } else { e };
                if s < 1 || e < s || e as usize > lines.len() {
                    return Err(format!(
                        "invalid `view_range` [{s}, {e}] for a file of {} lines",
                        lines.len()
                    ));
                }
                (s as usize, e as usize)
            }
        };
        Ok(numbered(&lines[start - 1..end], start))
    }

    fn create(&mut self, path: &Path, text: &str) -> Result<String, String> {
        if path.exists() {
            return Err(format!(
                "{} already exists; use `str_replace` to edit it",
                path.display()
            ));
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| e.to_string())?;
        }
        self.write(path, None, text)?;
        Ok(format!("File created successfully at: {}", path.display()))
    }

    fn str_replace(&mut self, path: &Path, old: &str, new: &str) -> Result<String, String> {
        if old.is_empty() {
            return Err("`old_str` must not be empty".into());
        }
        let text = Self::read(path)?;
        let hits: Vec<usize> = text.match_indices(old).map(|(i, _)| i).collect();
        match hits.len() {
            0 => Err(format!("`old_str` not found in {}", path.display())),
            1 => {
                let at = hits[0];
                let updated = format!("{}{new}{}", &text[..at], &text[at + old.len()..]);
                let line = text[..at].matches('\n').count();
                self.write(path, Some(text), &updated)?;
                Ok(format!(
                    "The file {} has been edited. Snippet:\n{}",
                    path.display(),
                    snippet(&updated, line, new.matches('\n').count() + 1)
                ))
            }
            n => {
                let lines: Vec<String> = hits
                    .iter()
                    .map(|&i| (text[..i].matches('\n').count() + 1).to_string())
                    .collect();
                Err(format!(
                    "`old_str` occurs {n} times (lines {}); make it unique",
                    lines.join(", ")
                ))
            }
        }
    }

    fn insert(&mut self, path: &Path, after: i64, new: &str) -> Result<String, String> {
        let text = Self::read(path)?;
        let mut lines: Vec<&str> = text.split('\n').collect();
        if after < 0 || after as usize > lines.len() {
            return Err(format!(
                "`insert_line` {after} out of range 0..={}",
                lines.len()
            ));
        }
        let at = after as usize;
        let new_lines: Vec<&str> = new.split('\n').collect();
        lines.splice(at..at, new_lines.iter().copied());
        let updated = lines.join("\n");
        self.write(path, Some(text), &updated)?;
        Ok(format!(
            "The file {} has been edited. Snippet:\n{}",
            path.display(),
            snippet(&updated, at, new_lines.len())
        ))
    }

    fn undo(&mut self, path: &Path) -> Result<String, String> {
        let prev = self
            .history
            .get_mut(path)
            .and_then(Vec::pop)
            .ok_or_else(|| format!("no edit history for {}", path.display()))?;
        fs::write(path, &prev).map_err(|e| e.to_string())?;
        Ok(format!("Last edit to {} undone.", path.display()))
    }
}

fn list_dir(dir: &Path, depth: usize, out: &mut Vec<String>) {
    let Ok(rd) = fs::read_dir(dir) else { return };
    for entry in rd.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        let p = entry.path();
        out.push(p.display().to_string());
        if p.is_dir() && depth < 1 {
            list_dir(&p, depth + 1, out);
        }
    }
}
