//! Gateway-driven corpus transformations: rewriting raw text, quality/harm
//! scoring, and the three synthesis families (user dossiers, scenarios,
//! social-reasoning QA).
//!
//! Every operation separates transport failures from content rejections:
//! gateway errors bubble up as [`crate::Error`] so the caller can retry the
//! work unit, while content that fails an invariant after one corrective
//! re-ask comes back as [`Outcome::Rejected`] with a stable reason string.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{ChatMessage, ChatRequest, Gateway};
use crate::kvblock::{fenced_body, parse_kv_block, split_blocks};
use crate::record::{char_len, CleanRecord, Quality, RawRecord, SourceKind, UserLog};
use crate::templates::{builtin, render_prompt};

/// System message sent with every curation request.
pub const CURATOR_SYSTEM: &str =
    "You are a careful data curator. Follow the requested output format exactly.";

/// Result of a content-level operation: either an artifact or a rejection
/// with a stable machine-readable reason.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome<T> {
    Accepted(T),
    Rejected { reason: String },
}

impl<T> Outcome<T> {
    pub fn rejected(reason: &str) -> Self {
        Outcome::Rejected {
            reason: reason.to_string(),
        }
    }

    pub fn accepted(self) -> Option<T> {
        match self {
            Outcome::Accepted(v) => Some(v),
            Outcome::Rejected { .. } => None,
        }
    }

    pub fn is_accepted(&self) -> bool {
        matches!(self, Outcome::Accepted(_))
    }

    pub fn reject_reason(&self) -> Option<&str> {
        match self {
            Outcome::Accepted(_) => None,
            Outcome::Rejected { reason } => Some(reason),
        }
    }
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// One remembered episode in a dossier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryEntry {
    pub summary: String,
    pub narrative: String,
}

/// Four-level description of one user: a short persona, a mid-length
/// profile, concrete stories, and a writing-style sketch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserDossier {
    pub user_id: String,
    pub persona: String,
    pub profile: String,
    pub stories: Vec<StoryEntry>,
    pub writing_style: String,
}

/// A named participant in a scenario.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterEntry {
    pub name: String,
    pub description: String,
}

/// Environment extracted from one record: background, characters, plots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub scenario_id: String,
    pub source_record_id: String,
    pub background: String,
    pub characters: Vec<CharacterEntry>,
    pub plots: String,
}

/// What a social-QA item asks about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaKind {
    NextAction,
    InnerState,
    SocialReasoning,
}

impl QaKind {
    pub const ALL: [QaKind; 3] = [QaKind::NextAction, QaKind::InnerState, QaKind::SocialReasoning];

    pub fn parse(s: &str) -> Option<QaKind> {
        match s.trim() {
            "next_action" => Some(QaKind::NextAction),
            "inner_state" => Some(QaKind::InnerState),
            "social_reasoning" => Some(QaKind::SocialReasoning),
            _ => None,
        }
    }
}

/// A scenario–question–answer triplet grounded in one record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SocialQA {
    pub qa_id: String,
    pub source_record_id: String,
    pub scenario_text: String,
    pub question: String,
    pub answer: String,
    pub kind: QaKind,
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Knobs for the synthesis stages. All fields have serde defaults so a
/// config file can set only what it overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    /// Model name sent to the gateway for every curation call.
    pub model_name: String,
    /// Upper bound on QA triplets requested per record.
    pub max_qa_per_record: usize,
    /// Character budget for the concatenated user context; oldest records
    /// are dropped first when over.
    pub context_budget_chars: usize,
    /// Sampling temperature for curation calls. Kept at 0 so retries of the
    /// same work unit are reproducible.
    pub temperature: f64,
    /// Per-source override of how many scenarios to extract per record.
    pub scenario_overrides: BTreeMap<String, usize>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            model_name: "mock-curator".to_string(),
            max_qa_per_record: 3,
            context_budget_chars: 16_000,
            temperature: 0.0,
            scenario_overrides: BTreeMap::new(),
        }
    }
}

impl SynthesisConfig {
    /// Scenarios to extract per record: 1 for the post platforms, 3 for
    /// long-form blogs, 0 for product reviews (which get no scenario or
    /// social-QA synthesis at all).
    pub fn scenarios_per_record(&self, source: SourceKind) -> usize {
        if let Some(&n) = self.scenario_overrides.get(&source.to_string()) {
            return n;
        }
        match source {
            SourceKind::Reddit | SourceKind::Twitter => 1,
            SourceKind::Blogger => 3,
            SourceKind::Amazon => 0,
        }
    }
}

pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

fn request(config: &SynthesisConfig, prompt: String) -> Result<ChatRequest> {
    Ok(ChatRequest::new(
        &config.model_name,
        vec![ChatMessage::system(CURATOR_SYSTEM), ChatMessage::user(&prompt)],
    )?
    .with_temperature(config.temperature))
}

/// Extends a conversation with the model's reply and a corrective follow-up,
/// for the single re-ask every operation is allowed.
pub(crate) fn reask(base: &ChatRequest, reply: &str, correction: &str) -> ChatRequest {
    let mut messages = base.messages.clone();
    messages.push(ChatMessage::assistant(reply));
    messages.push(ChatMessage::user(correction));
    ChatRequest::new(&base.model_name, messages)
        .expect("re-ask request is non-empty")
        .with_temperature(base.temperature)
}

// ---------------------------------------------------------------------------
// Rewrite
// ---------------------------------------------------------------------------

/// Builds the rewrite request for one record. Public so tests can pin
/// fixture responses by request digest.
pub fn rewrite_request(config: &SynthesisConfig, r: &RawRecord) -> Result<ChatRequest> {
    let extra_rules = match r.source {
        SourceKind::Twitter => "Remove every hashtag and every @-mention.",
        _ => "None.",
    };
    let prompt = render_prompt(
        builtin("rewrite")?,
        &BTreeMap::from([
            ("extra_rules".to_string(), extra_rules.to_string()),
            ("text".to_string(), r.text.clone()),
        ]),
    )?;
    request(config, prompt)
}

/// Strips tokens starting with '#' or '@' — local enforcement of the
/// no-hashtag/no-mention invariant for tweet rewrites, independent of how
/// well the model followed instructions.
fn strip_tags_mentions(text: &str) -> String {
    text.lines()
        .map(|line| {
            line.split_whitespace()
                .filter(|tok| !tok.starts_with('#') && !tok.starts_with('@'))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Rewrites one raw record into clean text (markup/URLs gone, sensitive
/// data replaced, non-English dropped; hashtags/mentions stripped for
/// tweets). Quality labels stay unset.
pub fn rewrite_text(
    gateway: &Gateway,
    config: &SynthesisConfig,
    r: &RawRecord,
) -> Result<Outcome<CleanRecord>> {
    let req = rewrite_request(config, r)?;
    let completion = gateway.complete(&req)?;
    let mut rewritten = completion.content.trim().to_string();
    if r.source == SourceKind::Twitter {
        rewritten = strip_tags_mentions(&rewritten);
    }
    if rewritten.trim().is_empty() {
        return Ok(Outcome::rejected("empty_rewrite"));
    }
    Ok(Outcome::Accepted(CleanRecord::from_raw(r.clone(), rewritten)))
}

// ---------------------------------------------------------------------------
// Score
// ---------------------------------------------------------------------------

/// Builds the scoring request for one rewritten record.
pub fn score_request(config: &SynthesisConfig, c: &CleanRecord) -> Result<ChatRequest> {
    let prompt = render_prompt(
        builtin("score")?,
        &BTreeMap::from([("text".to_string(), c.rewritten_text.clone())]),
    )?;
    request(config, prompt)
}

fn parse_score(reply: &str) -> Option<(Quality, bool)> {
    let kv = parse_kv_block(&fenced_body(reply));
    let quality = match kv.get("quality")?.trim().to_ascii_lowercase().as_str() {
        "high" => Quality::High,
        "medium" => Quality::Medium,
        "low" => Quality::Low,
        _ => return None,
    };
    let harmful = match kv.get("harmful")?.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" => true,
        "false" | "no" => false,
        _ => return None,
    };
    Some((quality, harmful))
}

/// Labels a rewritten record with a three-level quality grade and a binary
/// harm flag. Unparseable replies get one re-ask, then the record is
/// rejected.
pub fn score_text(
    gateway: &Gateway,
    config: &SynthesisConfig,
    c: &CleanRecord,
) -> Result<Outcome<CleanRecord>> {
    let req = score_request(config, c)?;
    let first = gateway.complete(&req)?;
    let parsed = match parse_score(&first.content) {
        Some(p) => Some(p),
        None => {
            let retry = reask(
                &req,
                &first.content,
                "Your reply did not match the required format. Reply again with exactly the \
                 fenced block: quality on one line, harmful on the next.",
            );
            parse_score(&gateway.complete(&retry)?.content)
        }
    };
    match parsed {
        Some((quality, harmful)) => {
            let mut labeled = c.clone();
            labeled.quality = Some(quality);
            labeled.harmful = Some(harmful);
            Ok(Outcome::Accepted(labeled))
        }
        None => Ok(Outcome::rejected("unparseable_score")),
    }
}

// ---------------------------------------------------------------------------
// User dossier
// ---------------------------------------------------------------------------

/// Chronological record concatenation under a character budget. Oldest
/// records are dropped first; if a single record still exceeds the budget
/// its head (the oldest part) is trimmed.
pub fn user_context(log: &UserLog, budget_chars: usize) -> String {
    let mut entries: Vec<String> = log
        .records
        .iter()
        .map(|r| format!("[t={}] {}", r.timestamp, r.rewritten_text))
        .collect();
    let sep_len = 5; // "\n---\n"
    let total = |es: &[String]| -> usize {
        es.iter().map(|e| char_len(e)).sum::<usize>() + sep_len * es.len().saturating_sub(1)
    };
    let mut start = 0;
    while entries.len() - start > 1 && total(&entries[start..]) > budget_chars {
        start += 1;
    }
    let mut kept: Vec<String> = entries.split_off(start);
    if kept.len() == 1 && char_len(&kept[0]) > budget_chars {
        let tail: String = kept[0]
            .chars()
            .skip(char_len(&kept[0]) - budget_chars)
            .collect();
        kept[0] = tail;
    }
    kept.join("\n---\n")
}

/// Builds the request for one dossier level ("persona", "profile",
/// "stories", "writing_style").
pub fn dossier_request(
    config: &SynthesisConfig,
    log: &UserLog,
    level: &str,
) -> Result<ChatRequest> {
    let context = user_context(log, config.context_budget_chars);
    let prompt = render_prompt(builtin(level)?, &BTreeMap::from([("records".to_string(), context)]))?;
    request(config, prompt)
}

fn parse_stories(reply: &str) -> Vec<StoryEntry> {
    split_blocks(&fenced_body(reply))
        .iter()
        .filter_map(|block| {
            let kv = parse_kv_block(block);
            let summary = kv.get("summary")?.trim().to_string();
            let narrative = kv.get("narrative")?.trim().to_string();
            if summary.is_empty() || narrative.is_empty() {
                return None;
            }
            Some(StoryEntry { summary, narrative })
        })
        .collect()
}

/// Truncates to the first `max_words` whitespace-separated words.
fn truncate_words(s: &str, max_words: usize) -> String {
    s.split_whitespace().take(max_words).collect::<Vec<_>>().join(" ")
}

/// Synthesizes the four-level dossier for one user from their admitted
/// records. Each level is one gateway call; levels that violate their
/// invariant get one corrective re-ask, after which the persona length and
/// the profile lower bound are hard rejections while an over-long profile
/// is truncated.
pub fn synth_user(
    gateway: &Gateway,
    config: &SynthesisConfig,
    log: &UserLog,
) -> Result<Outcome<UserDossier>> {
    if log.records.is_empty() {
        return Err(Error::data("synth_user: empty user log"));
    }

    let persona_req = dossier_request(config, log, "persona")?;
    let mut persona = gateway.complete(&persona_req)?.content.trim().to_string();
    if word_count(&persona) >= 100 {
        let retry = reask(
            &persona_req,
            &persona,
            "That persona is too long. Rewrite it in fewer than 100 words.",
        );
        persona = gateway.complete(&retry)?.content.trim().to_string();
        if word_count(&persona) >= 100 {
            return Ok(Outcome::rejected("persona_too_long"));
        }
    }
    if persona.is_empty() {
        return Ok(Outcome::rejected("empty_persona"));
    }

    let profile_req = dossier_request(config, log, "profile")?;
    let mut profile = gateway.complete(&profile_req)?.content.trim().to_string();
    if !(100..=400).contains(&word_count(&profile)) {
        let retry = reask(
            &profile_req,
            &profile,
            "The profile must be between 100 and 400 words. Rewrite it within that range.",
        );
        profile = gateway.complete(&retry)?.content.trim().to_string();
    }
    if word_count(&profile) < 100 {
        return Ok(Outcome::rejected("profile_too_short"));
    }
    if word_count(&profile) > 400 {
        profile = truncate_words(&profile, 400);
    }

    let stories_req = dossier_request(config, log, "stories")?;
    let first = gateway.complete(&stories_req)?.content;
    let mut stories = parse_stories(&first);
    if stories.is_empty() {
        let retry = reask(
            &stories_req,
            &first,
            "No stories could be parsed. Reply again using the fenced summary/narrative blocks.",
        );
        stories = parse_stories(&gateway.complete(&retry)?.content);
        if stories.is_empty() {
            return Ok(Outcome::rejected("no_stories"));
        }
    }

    let style_req = dossier_request(config, log, "writing_style")?;
    let mut style = gateway.complete(&style_req)?.content.trim().to_string();
    if style.is_empty() {
        let retry = reask(&style_req, &style, "Describe the writing style in a short paragraph.");
        style = gateway.complete(&retry)?.content.trim().to_string();
        if style.is_empty() {
            return Ok(Outcome::rejected("empty_writing_style"));
        }
    }

    Ok(Outcome::Accepted(UserDossier {
        user_id: log.user_id.clone(),
        persona,
        profile,
        stories,
        writing_style: style,
    }))
}

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

/// Builds the scenario-extraction request. `variant` differentiates
/// multiple extractions from the same record (long-form sources yield more
/// than one scenario per record).
pub fn scenario_request(
    config: &SynthesisConfig,
    c: &CleanRecord,
    variant: usize,
) -> Result<ChatRequest> {
    let mut text = c.rewritten_text.clone();
    if variant > 0 {
        text.push_str(&format!(
            "\n\nExtract a storyline distinct from the first {variant} you would pick."
        ));
    }
    let prompt = render_prompt(builtin("scenario")?, &BTreeMap::from([("text".to_string(), text)]))?;
    request(config, prompt)
}

fn parse_characters(value: &str) -> Vec<CharacterEntry> {
    value
        .lines()
        .filter_map(|line| {
            let line = line.trim().trim_start_matches('-').trim();
            if line.is_empty() {
                return None;
            }
            match line.split_once(':') {
                Some((name, desc)) => Some(CharacterEntry {
                    name: name.trim().to_string(),
                    description: desc.trim().to_string(),
                }),
                None => Some(CharacterEntry {
                    name: line.to_string(),
                    description: String::new(),
                }),
            }
        })
        .collect()
}

fn parse_scenario(reply: &str, scenario_id: &str, source_record_id: &str) -> Option<Scenario> {
    let kv = parse_kv_block(&fenced_body(reply));
    let background = kv.get("background")?.trim().to_string();
    let characters = parse_characters(kv.get("characters")?);
    let plots = kv.get("plots")?.trim().to_string();
    if background.is_empty() || characters.is_empty() || plots.is_empty() {
        return None;
    }
    Some(Scenario {
        scenario_id: scenario_id.to_string(),
        source_record_id: source_record_id.to_string(),
        background,
        characters,
        plots,
    })
}

/// Extracts one scenario (background, characters, plots) from an admitted
/// record. A malformed reply gets one re-ask, then the extraction is
/// rejected.
pub fn synth_scenario(
    gateway: &Gateway,
    config: &SynthesisConfig,
    c: &CleanRecord,
    variant: usize,
) -> Result<Outcome<Scenario>> {
    let scenario_id = format!("{}-sc{}", c.record_id, variant);
    let req = scenario_request(config, c, variant)?;
    let first = gateway.complete(&req)?.content;
    if let Some(s) = parse_scenario(&first, &scenario_id, &c.record_id) {
        return Ok(Outcome::Accepted(s));
    }
    let retry = reask(
        &req,
        &first,
        "The reply was missing a required section. Reply again with the fenced block containing \
         background, characters, and plots.",
    );
    let second = gateway.complete(&retry)?.content;
    match parse_scenario(&second, &scenario_id, &c.record_id) {
        Some(s) => Ok(Outcome::Accepted(s)),
        None => Ok(Outcome::rejected("incomplete_scenario")),
    }
}

// ---------------------------------------------------------------------------
// Social QA
// ---------------------------------------------------------------------------

/// Builds the social-QA request for one record.
pub fn social_qa_request(config: &SynthesisConfig, c: &CleanRecord) -> Result<ChatRequest> {
    let prompt = render_prompt(
        builtin("social_qa")?,
        &BTreeMap::from([
            ("text".to_string(), c.rewritten_text.clone()),
            ("max_qa".to_string(), config.max_qa_per_record.to_string()),
        ]),
    )?;
    request(config, prompt)
}

/// Generates up to `max_qa_per_record` scenario–question–answer triplets
/// from one admitted record. Malformed triplets are skipped with a warning;
/// zero parseable triplets is an empty result, not an error.
pub fn synth_social_qa(
    gateway: &Gateway,
    config: &SynthesisConfig,
    c: &CleanRecord,
) -> Result<Vec<SocialQA>> {
    let req = social_qa_request(config, c)?;
    let reply = gateway.complete(&req)?.content;
    let mut out = Vec::new();
    for (i, block) in split_blocks(&fenced_body(&reply)).iter().enumerate() {
        if out.len() >= config.max_qa_per_record {
            break;
        }
        let kv = parse_kv_block(block);
        let fields = (
            kv.get("scenario").map(|s| s.trim().to_string()),
            kv.get("question").map(|s| s.trim().to_string()),
            kv.get("answer").map(|s| s.trim().to_string()),
            kv.get("kind").and_then(|s| QaKind::parse(s)),
        );
        match fields {
            (Some(scenario), Some(question), Some(answer), Some(kind))
                if !scenario.is_empty() && !question.is_empty() && !answer.is_empty() =>
            {
                out.push(SocialQA {
                    qa_id: format!("{}-qa{}", c.record_id, out.len()),
                    source_record_id: c.record_id.clone(),
                    scenario_text: scenario,
                    question,
                    answer,
                    kind,
                });
            }
            _ => {
                log::warn!(
                    "social_qa: skipping malformed triplet {} of record {}",
                    i,
                    c.record_id
                );
            }
        }
    }
    Ok(out)
}
