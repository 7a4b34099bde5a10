use super::Step;

/// Prefix of a compressed observation body.
pub const OLD_OUTPUT_PREFIX: &str = "Old environment output: ";

fn marker(removed: usize) -> String {
    format!("\n... (truncated {removed} characters) ...")
}

fn digits(n: usize) -> usize {
    n.to_string().len()
}

/// Head-preserving truncation to at most `char_cap` characters.
///
/// The kept head plus the marker fills the cap exactly, and the marker states
/// how many characters were dropped.
pub fn truncate_message(body: &str, char_cap: usize) -> String {
    let len = body.chars().count();
    if len <= char_cap {
        return body.to_string();
    }
    let base = marker(0).chars().count() - 1;
    assert!(char_cap > base + digits(len), "char_cap must exceed the marker length");
    // removed = len - (cap - base - d), where d is the digit count of removed.
    let excess = len - char_cap + base;
    let d = (1..=20).find(|&d| digits(excess + d) == d).expect("digit count converges");
    let removed = excess + d;
    let head: String = body.chars().take(len - removed).collect();
    head + &marker(removed)
}

/// Whether `body` carries one of the markers this module inserts.
pub fn has_truncation_marker(body: &str) -> bool {
    (body.contains("... (truncated ") && body.contains(" characters) ..."))
        || (body.starts_with(OLD_OUTPUT_PREFIX) && body.ends_with(" lines omitted)"))
}

pub fn compress_body(body: &str) -> String {
    format!("{OLD_OUTPUT_PREFIX}({} lines omitted)", body.lines().count())
}

/// Replaces every observation older than the last `keep` with a line-count stub.
pub fn compress_old_observations(steps: &[Step], keep: usize) -> Vec<Step> {
    let cut = steps.len().saturating_sub(keep);
    steps
        .iter()
        .enumerate()
        .map(|(i, step)| {
            let mut step = step.clone();
            if i < cut && !step.observation.body.starts_with(OLD_OUTPUT_PREFIX) {
                step.observation.body = compress_body(&step.observation.body);
                step.observation.truncated = true;
            }
            step
        })
        .collect()
}
