//! Multiple-choice evaluation: item construction (20-way item selection,
//! 8-way with model-generated distractors), answering and scoring against
//! an endpoint, improvement arithmetic, and rubric-based judging.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{ChatMessage, ChatRequest, Gateway};
use crate::kvblock::{leading_f64, parse_kv_block};
use crate::seeding::seeded_rng;
use crate::synthesis::{reask, Outcome};
use crate::tasks::{option_letter, CatalogItem, TaskKind, ITEM_SELECTION_CANDIDATES};
use crate::templates::{builtin, render_prompt};

/// The seven models whose answers serve as 8-way distractors.
pub const DISTRACTOR_MODELS: [&str; 7] = [
    "GPT-4o",
    "Llama-3.1-8B-Instruct",
    "Llama-3.1-70B-Instruct",
    "Qwen2.5-7B-Instruct",
    "Qwen2.5-72B-Instruct",
    "Phi-4",
    "Qwen3-8B",
];

const DISTRACTOR_TEMPERATURE: f64 = 0.7;
const ANSWER_TEMPERATURE: f64 = 0.0;
const JUDGE_TEMPERATURE: f64 = 0.0;

/// One lettered answer option.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOption {
    pub label: char,
    pub text: String,
}

/// One multiple-choice question. `task` is one of the six built-in task
/// names or an external benchmark's task label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub item_id: String,
    pub task: String,
    pub stem: String,
    pub options: Vec<EvalOption>,
    pub gold_label: char,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl EvalItem {
    /// Labels consecutive from 'A', unique option texts, exactly one gold,
    /// and the per-task option count: 20 for item selection, 8 for the
    /// other built-in tasks, at least 2 for external task labels.
    pub fn validate(&self) -> Result<()> {
        let id = &self.item_id;
        match TaskKind::parse(&self.task) {
            Some(TaskKind::ItemSelection) => {
                if self.options.len() != ITEM_SELECTION_CANDIDATES {
                    return Err(Error::data(format!(
                        "item {id}: item selection needs {ITEM_SELECTION_CANDIDATES} options, got {}",
                        self.options.len()
                    )));
                }
            }
            Some(_) => {
                if self.options.len() != 8 {
                    return Err(Error::data(format!(
                        "item {id}: task {} needs 8 options, got {}",
                        self.task,
                        self.options.len()
                    )));
                }
            }
            None => {
                if self.options.len() < 2 {
                    return Err(Error::data(format!(
                        "item {id}: needs at least 2 options, got {}",
                        self.options.len()
                    )));
                }
            }
        }
        for (i, opt) in self.options.iter().enumerate() {
            let expected = option_letter(i);
            if opt.label != expected {
                return Err(Error::data(format!(
                    "item {id}: option {i} labeled {}, expected {expected}",
                    opt.label
                )));
            }
        }
        let texts: BTreeSet<&str> = self.options.iter().map(|o| o.text.as_str()).collect();
        if texts.len() != self.options.len() {
            return Err(Error::data(format!("item {id}: duplicate option texts")));
        }
        if !self.options.iter().any(|o| o.label == self.gold_label) {
            return Err(Error::data(format!(
                "item {id}: gold label {} is not an option",
                self.gold_label
            )));
        }
        Ok(())
    }

    pub fn gold_text(&self) -> &str {
        &self
            .options
            .iter()
            .find(|o| o.label == self.gold_label)
            .expect("validated item has a gold option")
            .text
    }
}

/// Accuracy bookkeeping for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Scores per task plus their unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: BTreeMap<String, TaskScore>,
    pub average: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub improvement_pct: Option<f64>,
    pub unextracted: usize,
}

impl EvalReport {
    /// Attaches the improvement column relative to a baseline average.
    pub fn with_baseline(mut self, base_avg: f64) -> Result<EvalReport> {
        self.improvement_pct = Some(improvement_pct(self.average, base_avg)?);
        Ok(self)
    }
}

/// Builds one 20-way item-selection question: the purchased item plus 19
/// seeded uniform negatives from the pool, in seeded order.
pub fn build_item_selection_item(
    positive: &CatalogItem,
    history: &[CatalogItem],
    pool: &[CatalogItem],
    seed: u64,
) -> Result<EvalItem> {
    if history.iter().any(|h| h.item_id == positive.item_id) {
        return Err(Error::data(format!(
            "item selection: positive {} present in history",
            positive.item_id
        )));
    }
    let excluded: BTreeSet<&str> = history
        .iter()
        .map(|h| h.item_id.as_str())
        .chain(std::iter::once(positive.item_id.as_str()))
        .collect();
    let mut negatives: Vec<&CatalogItem> = {
        let mut seen = BTreeSet::new();
        pool.iter()
            .filter(|i| !excluded.contains(i.item_id.as_str()) && seen.insert(i.item_id.as_str()))
            .collect()
    };
    if negatives.len() < ITEM_SELECTION_CANDIDATES - 1 {
        return Err(Error::data("pool_too_small"));
    }
    let mut rng = seeded_rng(seed, &format!("eval-item-selection:{}", positive.item_id));
    negatives.shuffle(&mut rng);
    negatives.truncate(ITEM_SELECTION_CANDIDATES - 1);
    let mut candidates = negatives;
    candidates.push(positive);
    candidates.shuffle(&mut rng);

    let gold_idx = candidates
        .iter()
        .position(|c| c.item_id == positive.item_id)
        .expect("positive is in candidates");
    let history_lines = if history.is_empty() {
        "(none)".to_string()
    } else {
        history
            .iter()
            .map(|h| format!("- {}", h.item_name))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let stem = format!(
        "Items the user engaged with before:\n{history_lines}\n\n\
         Select the one candidate this user would most prefer."
    );
    let options = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| EvalOption {
            label: option_letter(i),
            text: c.item_name.clone(),
        })
        .collect();
    let mut meta = BTreeMap::new();
    meta.insert("positive_item_id".to_string(), positive.item_id.clone());
    let item = EvalItem {
        item_id: format!("is-{}-s{}", positive.item_id, seed),
        task: TaskKind::ItemSelection.as_str().to_string(),
        stem,
        options,
        gold_label: option_letter(gold_idx),
        meta,
    };
    item.validate()?;
    Ok(item)
}

fn distractor_request(model: &str, stem: &str) -> Result<ChatRequest> {
    let mut bindings = BTreeMap::new();
    bindings.insert("stem".to_string(), stem.to_string());
    let prompt = render_prompt(builtin("distractor")?, &bindings)?;
    Ok(ChatRequest::new(model, vec![ChatMessage::user(&prompt)])?
        .with_temperature(DISTRACTOR_TEMPERATURE))
}

/// Builds one 8-way question: the gold answer plus one distractor per
/// listed model. A distractor equal to the gold or to an earlier option is
/// re-asked once; a model still colliding after that sinks the item.
pub fn build_8way_item(
    item_id: &str,
    task: TaskKind,
    stem: &str,
    gold_answer: &str,
    distractor_models: &[&str],
    gateway: &Gateway,
    seed: u64,
) -> Result<Outcome<EvalItem>> {
    let gold = gold_answer.trim().to_string();
    let mut texts: Vec<String> = vec![gold.clone()];
    for model in distractor_models {
        let req = distractor_request(model, stem)?;
        let mut answer = gateway.complete(&req)?.content.trim().to_string();
        if texts.contains(&answer) {
            let retry = reask(
                &req,
                &answer,
                "That answer is already taken. Give a different plausible answer, worded differently.",
            );
            answer = gateway.complete(&retry)?.content.trim().to_string();
        }
        if texts.contains(&answer) || answer.is_empty() {
            log::warn!("eval item {item_id}: unusable distractor from {model}, skipping item");
            return Ok(Outcome::rejected("duplicate_distractors"));
        }
        texts.push(answer);
    }
    let mut rng = seeded_rng(seed, &format!("mcq-shuffle:{item_id}"));
    texts.shuffle(&mut rng);
    let gold_idx = texts.iter().position(|t| *t == gold).expect("gold present");
    let options = texts
        .iter()
        .enumerate()
        .map(|(i, t)| EvalOption {
            label: option_letter(i),
            text: t.clone(),
        })
        .collect();
    let item = EvalItem {
        item_id: item_id.to_string(),
        task: task.as_str().to_string(),
        stem: stem.to_string(),
        options,
        gold_label: option_letter(gold_idx),
        meta: BTreeMap::new(),
    };
    item.validate()?;
    Ok(Outcome::Accepted(item))
}

/// Extracts the answered option letter: the first whitespace-separated
/// token that reduces to a single in-range letter after shedding a leading
/// '(' and trailing ')', '.', ':' or ','. Case-insensitive.
pub fn extract_answer(reply: &str, n_options: usize) -> Option<char> {
    if n_options == 0 {
        return None;
    }
    let last = option_letter(n_options - 1);
    for token in reply.split_whitespace() {
        let t = token.trim_start_matches('(');
        let t = t.trim_end_matches([')', '.', ':', ',']);
        let mut chars = t.chars();
        let (Some(c), None) = (chars.next(), chars.next()) else {
            continue;
        };
        let upper = c.to_ascii_uppercase();
        if upper.is_ascii_uppercase() && ('A'..=last).contains(&upper) {
            return Some(upper);
        }
    }
    None
}

fn answer_request(model: &str, item: &EvalItem) -> Result<ChatRequest> {
    let options = item
        .options
        .iter()
        .map(|o| format!("{}) {}", o.label, o.text))
        .collect::<Vec<_>>()
        .join("\n");
    let mut bindings = BTreeMap::new();
    bindings.insert("stem".to_string(), item.stem.clone());
    bindings.insert("options".to_string(), options);
    let prompt = render_prompt(builtin("answer_mcq")?, &bindings)?;
    Ok(ChatRequest::new(model, vec![ChatMessage::user(&prompt)])?
        .with_temperature(ANSWER_TEMPERATURE))
}

/// Asks `model` every item and grades the extracted letters. A reply with
/// no extractable letter counts as wrong and is logged.
pub fn run_eval(items: &[EvalItem], gateway: &Gateway, model: &str) -> Result<EvalReport> {
    for item in items {
        item.validate()?;
    }
    let graded: Vec<(String, bool, bool)> = items
        .par_iter()
        .map(|item| -> Result<(String, bool, bool)> {
            let req = answer_request(model, item)?;
            let reply = gateway.complete(&req)?.content;
            match extract_answer(&reply, item.options.len()) {
                Some(letter) => Ok((item.task.clone(), letter == item.gold_label, false)),
                None => {
                    log::warn!(
                        "eval item {}: no option letter in reply {:?}",
                        item.item_id,
                        reply.chars().take(80).collect::<String>()
                    );
                    Ok((item.task.clone(), false, true))
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut unextracted = 0;
    for (task, correct, missing) in graded {
        let entry = counts.entry(task).or_insert((0, 0));
        entry.1 += 1;
        if correct {
            entry.0 += 1;
        }
        if missing {
            unextracted += 1;
        }
    }
    let per_task: BTreeMap<String, TaskScore> = counts
        .into_iter()
        .map(|(task, (correct, total))| {
            let accuracy = correct as f64 / total as f64;
            (task, TaskScore { correct, total, accuracy })
        })
        .collect();
    if per_task.is_empty() {
        return Err(Error::data("run_eval: no items"));
    }
    let average =
        per_task.values().map(|s| s.accuracy).sum::<f64>() / per_task.len() as f64;
    Ok(EvalReport {
        per_task,
        average,
        improvement_pct: None,
        unextracted,
    })
}

/// Relative improvement of `new_avg` over `base_avg`, in percent, rounded
/// to two decimals.
pub fn improvement_pct(new_avg: f64, base_avg: f64) -> Result<f64> {
    if base_avg <= 0.0 {
        return Err(Error::data(format!(
            "improvement needs a positive baseline, got {base_avg}"
        )));
    }
    Ok((100.0 * (new_avg - base_avg) / base_avg * 100.0).round() / 100.0)
}

/// The three rubric-scored applications, each with a fixed metric triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum JudgeApplication {
    ProfileGeneration,
    HumanExplainer,
    PersonalizedWriting,
}

impl JudgeApplication {
    pub const ALL: [JudgeApplication; 3] = [
        JudgeApplication::ProfileGeneration,
        JudgeApplication::HumanExplainer,
        JudgeApplication::PersonalizedWriting,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            JudgeApplication::ProfileGeneration => "profile_generation",
            JudgeApplication::HumanExplainer => "human_explainer",
            JudgeApplication::PersonalizedWriting => "personalized_writing",
        }
    }

    pub fn parse(s: &str) -> Option<JudgeApplication> {
        JudgeApplication::ALL.into_iter().find(|a| a.as_str() == s)
    }

    pub fn metrics(&self) -> [&'static str; 3] {
        match self {
            JudgeApplication::ProfileGeneration => ["faithfulness", "realism", "coverage"],
            JudgeApplication::HumanExplainer => {
                ["contextual_relevance", "logical_consistency", "alignment"]
            }
            JudgeApplication::PersonalizedWriting => {
                ["style_match", "content_relevance", "content_similarity"]
            }
        }
    }
}

impl std::fmt::Display for JudgeApplication {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One sample for rubric judging.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JudgeSample {
    pub generated: String,
    pub reference: String,
    pub context: String,
}

/// Per-metric means over a judged batch plus their average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub application: String,
    pub per_metric: BTreeMap<String, f64>,
    pub average: f64,
    pub scored: usize,
    pub skipped: usize,
}

fn judge_request(
    model: &str,
    application: JudgeApplication,
    sample: &JudgeSample,
) -> Result<ChatRequest> {
    let mut bindings = BTreeMap::new();
    bindings.insert("application".to_string(), application.as_str().to_string());
    bindings.insert("metrics".to_string(), application.metrics().join(", "));
    bindings.insert("context".to_string(), sample.context.clone());
    bindings.insert("reference".to_string(), sample.reference.clone());
    bindings.insert("generated".to_string(), sample.generated.clone());
    let prompt = render_prompt(builtin("judge")?, &bindings)?;
    Ok(ChatRequest::new(model, vec![ChatMessage::user(&prompt)])?
        .with_temperature(JUDGE_TEMPERATURE))
}

fn parse_judge(reply: &str, metrics: &[&'static str; 3]) -> Option<BTreeMap<String, f64>> {
    let entries = parse_kv_block(reply);
    let mut scores = BTreeMap::new();
    for metric in metrics {
        let value = leading_f64(entries.get(*metric)?)?;
        if !(1.0..=10.0).contains(&value) {
            return None;
        }
        scores.insert(metric.to_string(), value);
    }
    Some(scores)
}

/// Scores one generated output on the application's metric triple, 1–10.
/// One re-ask on an unparseable or out-of-range reply, then the sample is
/// skipped.
pub fn judge_score(
    gateway: &Gateway,
    model: &str,
    application: JudgeApplication,
    sample: &JudgeSample,
) -> Result<Outcome<BTreeMap<String, f64>>> {
    let metrics = application.metrics();
    let req = judge_request(model, application, sample)?;
    let reply = gateway.complete(&req)?.content;
    if let Some(scores) = parse_judge(&reply, &metrics) {
        return Ok(Outcome::Accepted(scores));
    }
    let retry = reask(
        &req,
        &reply,
        "Reply with exactly one fenced block containing one `metric: score` line per listed \
         metric, each score between 1 and 10.",
    );
    let reply = gateway.complete(&retry)?.content;
    match parse_judge(&reply, &metrics) {
        Some(scores) => Ok(Outcome::Accepted(scores)),
        None => {
            log::warn!("judge reply unparseable twice for {application}, skipping sample");
            Ok(Outcome::rejected("unparseable_judge"))
        }
    }
}

/// Judges a batch and reports per-metric means plus their average.
pub fn judge_batch(
    gateway: &Gateway,
    model: &str,
    application: JudgeApplication,
    samples: &[JudgeSample],
) -> Result<JudgeReport> {
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for sample in samples {
        match judge_score(gateway, model, application, sample)? {
            Outcome::Accepted(scores) => {
                for (metric, value) in scores {
                    *sums.entry(metric).or_insert(0.0) += value;
                }
                scored += 1;
            }
            Outcome::Rejected { .. } => skipped += 1,
        }
    }
    if scored == 0 {
        return Err(Error::data("judge batch: no sample scored"));
    }
    let per_metric: BTreeMap<String, f64> = sums
        .into_iter()
        .map(|(metric, sum)| (metric, sum / scored as f64))
        .collect();
    let average = per_metric.values().sum::<f64>() / per_metric.len() as f64;
    Ok(JudgeReport {
        application: application.as_str().to_string(),
        per_metric,
        average,
        scored,
        skipped,
    })
}
