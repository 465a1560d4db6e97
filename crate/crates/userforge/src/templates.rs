//! Versioned prompt templates and strict placeholder rendering.
//!
//! Every LLM prompt this crate issues is rendered from a template asset
//! compiled into the binary, so synthesis runs are auditable: the prompt a
//! stage used is fixed by the crate version, not by runtime configuration.
//! Placeholders use `{name}` with lowercase snake-case names; rendering is
//! strict in both directions — a missing binding and an unused binding are
//! both errors.
//!
//! Each builtin template opens with a `[[task:...]]` marker line. The
//! marker names the operation the prompt belongs to; the deterministic mock
//! backend routes on it, and in live traffic it doubles as an audit tag.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

/// A prompt template with named `{placeholder}` slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: String,
    pub body: String,
    pub required_bindings: BTreeSet<String>,
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z][a-z0-9_]*)\}").unwrap())
}

impl PromptTemplate {
    pub fn new(template_id: &str, body: &str) -> Self {
        let required_bindings = placeholder_re()
            .captures_iter(body)
            .map(|c| c[1].to_string())
            .collect();
        PromptTemplate {
            template_id: template_id.to_string(),
            body: body.to_string(),
            required_bindings,
        }
    }
}

/// Substitutes every placeholder exactly once. Errors name the first
/// missing binding; bindings that match no placeholder are rejected too, so
/// a typo in a binding name cannot silently drop content.
pub fn render_prompt(
    template: &PromptTemplate,
    bindings: &BTreeMap<String, String>,
) -> Result<String> {
    let mut used: BTreeSet<String> = BTreeSet::new();
    let mut missing: BTreeSet<String> = BTreeSet::new();
    let rendered = placeholder_re().replace_all(&template.body, |caps: &regex::Captures<'_>| {
        let name = caps.get(1).unwrap().as_str();
        match bindings.get(name) {
            Some(value) => {
                used.insert(name.to_string());
                value.clone()
            }
            None => {
                missing.insert(name.to_string());
                String::new()
            }
        }
    });
    if let Some(name) = missing.iter().next() {
        return Err(Error::Template(format!(
            "template {}: missing binding: {name}",
            template.template_id
        )));
    }
    if let Some(unknown) = bindings.keys().find(|k| !used.contains(k.as_str())) {
        return Err(Error::Template(format!(
            "template {}: unknown binding: {unknown}",
            template.template_id
        )));
    }
    Ok(rendered.into_owned())
}

macro_rules! builtin_assets {
    ($($id:literal),+ $(,)?) => {
        [$(($id, include_str!(concat!("../assets/prompts/", $id, ".txt")))),+]
    };
}

const BUILTIN_ASSETS: [(&str, &str); 13] = builtin_assets![
    "rewrite",
    "score",
    "persona",
    "profile",
    "stories",
    "writing_style",
    "scenario",
    "social_qa",
    "qc",
    "distractor",
    "judge",
    "answer_mcq",
    "topic_summary",
];

fn registry() -> &'static BTreeMap<&'static str, PromptTemplate> {
    static REGISTRY: OnceLock<BTreeMap<&'static str, PromptTemplate>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        BUILTIN_ASSETS
            .iter()
            .map(|(id, body)| (*id, PromptTemplate::new(id, body)))
            .collect()
    })
}

/// Looks up a compiled-in template by id.
pub fn builtin(template_id: &str) -> Result<&'static PromptTemplate> {
    registry()
        .get(template_id)
        .ok_or_else(|| Error::Template(format!("unknown template id: {template_id}")))
}

pub fn builtin_ids() -> Vec<&'static str> {
    registry().keys().copied().collect()
}

/// Extracts the `[[task:...]]` marker from a message content, if present.
pub fn task_marker(content: &str) -> Option<&str> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\[\[task:([a-z0-9_]+)\]\]").unwrap());
    re.captures(content)
        .map(|c| c.get(1).unwrap().as_str())
}

/// Extracts the segments wrapped in `<<<` / `>>>` delimiter lines, in
/// order. The mock backend uses this to read the material a prompt is
/// about.
pub fn delimited_segments(content: &str) -> Vec<String> {
    let mut segments = Vec::new();
    let mut current: Option<String> = None;
    for line in content.lines() {
        match line.trim() {
            "<<<" => current = Some(String::new()),
            ">>>" => {
                if let Some(segment) = current.take() {
                    segments.push(segment.trim().to_string());
                }
            }
            _ => {
                if let Some(segment) = current.as_mut() {
                    segment.push_str(line);
                    segment.push('\n');
                }
            }
        }
    }
    segments
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn renders_simple_template() {
        let t = PromptTemplate::new("t", "Hello {name}");
        assert_eq!(render_prompt(&t, &bind(&[("name", "X")])).unwrap(), "Hello X");
    }

    #[test]
    fn missing_binding_is_named_in_error() {
        let t = PromptTemplate::new("t", "Hello {name}");
        let err = render_prompt(&t, &bind(&[])).unwrap_err();
        assert!(err.to_string().contains("missing binding: name"));
    }

    #[test]
    fn unknown_binding_is_rejected() {
        let t = PromptTemplate::new("t", "Hello {name}");
        let err = render_prompt(&t, &bind(&[("name", "X"), ("extra", "Y")])).unwrap_err();
        assert!(err.to_string().contains("unknown binding: extra"));
    }

    #[test]
    fn three_placeholders_leave_no_residual_markers() {
        let t = PromptTemplate::new("t", "{a} and {b} then {c}");
        assert_eq!(t.required_bindings.len(), 3);
        let out = render_prompt(&t, &bind(&[("a", "1"), ("b", "2"), ("c", "3")])).unwrap();
        assert_eq!(out, "1 and 2 then 3");
        assert!(!placeholder_re().is_match(&out));
    }

    #[test]
    fn repeated_placeholder_substitutes_everywhere() {
        let t = PromptTemplate::new("t", "{x}, {x}, {x}");
        assert_eq!(render_prompt(&t, &bind(&[("x", "ho")])).unwrap(), "ho, ho, ho");
    }

    #[test]
    fn binding_value_with_braces_is_not_reexpanded() {
        let t = PromptTemplate::new("t", "say {text}");
        let out = render_prompt(&t, &bind(&[("text", "literal {name} kept")])).unwrap();
        assert_eq!(out, "say literal {name} kept");
    }

    #[test]
    fn all_builtins_load_with_marker_lines() {
        for id in builtin_ids() {
            let t = builtin(id).unwrap();
            assert_eq!(t.template_id, id);
            assert_eq!(
                task_marker(&t.body),
                Some(id),
                "template {id} must open with its own marker"
            );
        }
        assert_eq!(builtin_ids().len(), 13);
    }

    #[test]
    fn unknown_builtin_is_an_error() {
        assert!(builtin("nope").is_err());
    }

    #[test]
    fn rewrite_template_bindings() {
        let t = builtin("rewrite").unwrap();
        let expected: BTreeSet<String> =
            ["extra_rules", "text"].iter().map(|s| s.to_string()).collect();
        assert_eq!(t.required_bindings, expected);
    }

    #[test]
    fn delimited_segments_extracts_in_order() {
        let content = "header\n<<<\nfirst part\n>>>\nmiddle\n<<<\nsecond\npart\n>>>\n";
        let segments = delimited_segments(content);
        assert_eq!(segments, vec!["first part".to_string(), "second\npart".to_string()]);
    }

    #[test]
    fn marker_detection() {
        assert_eq!(task_marker("[[task:score]]\nrest"), Some("score"));
        assert_eq!(task_marker("no marker here"), None);
    }
}
