//! Tolerant parser for fenced key–value blocks in model responses.
//!
//! Structured prompts ask the model to reply with a fenced block of
//! `key: value` lines. Models drift: they add prose around the fence, vary
//! capitalization and spacing, wrap values across lines, or omit the fence
//! entirely. This parser accepts all of that; the *caller* decides which
//! keys are required and re-asks or rejects when they are missing.
//!
//! Rules:
//! - If the text contains a ``` fence, only the first fenced block is
//!   parsed; otherwise the whole text is.
//! - A line `key: value` starts an entry. Keys are normalized to lowercase
//!   with inner whitespace collapsed to `_`, so `Style Match:` and
//!   `style_match:` are the same key.
//! - Non-key lines continue the previous value (joined with newlines);
//!   lines starting with `-` never open a new key, so list items with
//!   colons stay inside the current value.
//! - A repeated key overwrites the earlier occurrence (last wins).

use std::collections::BTreeMap;

use regex::Regex;
use std::sync::OnceLock;

fn key_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*([A-Za-z][A-Za-z0-9_ ]{0,63})\s*:\s*(.*)$").unwrap())
}

/// Extracts the body of the first ``` fence, or the whole text when no
/// fence is present. An unterminated fence runs to the end of the text.
pub fn fenced_body(text: &str) -> &str {
    let Some(open) = text.find("```") else {
        return text;
    };
    let after_marker = &text[open + 3..];
    // Skip the rest of the fence line (possible language tag).
    let body_start = match after_marker.find('\n') {
        Some(nl) => nl + 1,
        None => return "",
    };
    let body = &after_marker[body_start..];
    match body.find("```") {
        Some(close) => &body[..close],
        None => body,
    }
}

fn normalize_key(raw: &str) -> String {
    raw.trim()
        .to_ascii_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join("_")
}

/// Parses `key: value` entries from the (first) fenced block of `text`.
pub fn parse_kv_block(text: &str) -> BTreeMap<String, String> {
    let body = fenced_body(text);
    let mut entries: BTreeMap<String, String> = BTreeMap::new();
    let mut current: Option<String> = None;
    for line in body.lines() {
        let is_list_item = line.trim_start().starts_with('-');
        if !is_list_item {
            if let Some(caps) = key_line_re().captures(line) {
                let key = normalize_key(&caps[1]);
                let value = caps[2].trim_end().to_string();
                entries.insert(key.clone(), value);
                current = Some(key);
                continue;
            }
        }
        if line.trim().is_empty() {
            continue;
        }
        if let Some(key) = &current {
            let value = entries.get_mut(key).expect("current key exists");
            if !value.is_empty() {
                value.push('\n');
            }
            value.push_str(line.trim());
        }
    }
    entries
}

/// Splits a response into chunks on delimiter lines of three or more
/// dashes. Used for multi-record responses (one chunk per record).
pub fn split_blocks(text: &str) -> Vec<String> {
    let body = fenced_body(text);
    let mut blocks = Vec::new();
    let mut current = String::new();
    for line in body.lines() {
        let trimmed = line.trim();
        if trimmed.len() >= 3 && trimmed.chars().all(|c| c == '-') {
            if !current.trim().is_empty() {
                blocks.push(current.clone());
            }
            current.clear();
        } else {
            current.push_str(line);
            current.push('\n');
        }
    }
    if !current.trim().is_empty() {
        blocks.push(current);
    }
    blocks
}

/// Leading integer of a value like `8`, `8/10`, or `8 out of 10`.
pub fn leading_int(value: &str) -> Option<i64> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"^\s*(-?\d+)").unwrap());
    re.captures(value)?.get(1)?.as_str().parse().ok()
}

/// Leading real number of a value like `7.8391` or `8`.
pub fn leading_f64(value: &str) -> Option<f64> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"^\s*(-?\d+(?:\.\d+)?)").unwrap());
    re.captures(value)?.get(1)?.as_str().parse().ok()
}
