use serde::{Deserialize, Serialize};

use crate::llm::TokenCounter;
use crate::tools::{compress_old_observations, Step};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextBudget {
    pub max_context_tokens: usize,
    pub cleanup_trigger_ratio: f64,
    pub keep_last_iterations: usize,
    pub swe_mode: bool,
    pub swe_char_cap: usize,
    pub swe_keep_observations: usize,
}

impl Default for ContextBudget {
    fn default() -> Self {
        Self {
            max_context_tokens: 32_000,
            cleanup_trigger_ratio: 0.8,
            keep_last_iterations: 10,
            swe_mode: false,
            swe_char_cap: 8_000,
            swe_keep_observations: 10,
        }
    }
}

impl ContextBudget {
    /// Token count at which cleanup kicks in.
    pub fn threshold(&self) -> usize {
        (self.max_context_tokens as f64 * self.cleanup_trigger_ratio).floor() as usize
    }

    pub fn check(&self) -> Result<(), String> {
        if self.max_context_tokens == 0 {
            return Err("max_context_tokens must be positive".into());
        }
        if !(self.cleanup_trigger_ratio > 0.0 && self.cleanup_trigger_ratio <= 1.0) {
            return Err("cleanup_trigger_ratio must be in (0, 1]".into());
        }
        if self.keep_last_iterations == 0 || self.swe_keep_observations == 0 {
            return Err("keep counts must be positive".into());
        }
        if self.swe_char_cap <= 64 {
            return Err("swe_char_cap is too small to hold the truncation marker".into());
        }
        Ok(())
    }
}

/// Tokens of the rendered steps (assistant turn plus tool response each).
pub fn steps_tokens(steps: &[Step], counter: &dyn TokenCounter) -> usize {
    steps
        .iter()
        .map(|s| counter.count(&s.assistant_text()) + counter.count(&s.response_text()))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyResult {
    pub steps: Vec<Step>,
    pub cleaned: bool,
}

/// Shrinks the stage-local window before the next completion.
///
/// In SWE mode every observation but the latest is truncated and old ones
/// are compressed. Then, if the prompt would reach the trigger threshold,
/// only the most recent `keep_last_iterations` steps are kept.
pub fn apply_context_policy(
    steps: &[Step],
    prompt_prefix_tokens: usize,
    budget: &ContextBudget,
    counter: &dyn TokenCounter,
) -> PolicyResult {
    let mut out: Vec<Step> = steps.to_vec();
    if budget.swe_mode && !out.is_empty() {
        let last = out.len() - 1;
        for step in &mut out[..last] {
            step.observation.truncate(budget.swe_char_cap);
        }
        out = compress_old_observations(&out, budget.swe_keep_observations);
    }
    let total = prompt_prefix_tokens + steps_tokens(&out, counter);
    let cleaned = total >= budget.threshold() && out.len() > budget.keep_last_iterations;
    if cleaned {
        out.drain(..out.len() - budget.keep_last_iterations);
    }
    PolicyResult { steps: out, cleaned }
}
