//! Training-task assembly: turn gated artifacts into conversation-format
//! samples for six task families, then balance, split, and (optionally)
//! mix with general-purpose corpora.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{CleanRecord, SourceKind};
use crate::seeding::{derive_seed, seeded_rng};
use crate::synthesis::{Scenario, SocialQA, UserDossier};

/// History excerpts included in writing-imitation and commenting prompts.
pub const HISTORY_WINDOW: usize = 3;

/// Candidate-list size for item selection.
pub const ITEM_SELECTION_CANDIDATES: usize = 20;

/// The six task families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ProfileGeneration,
    ScenarioGeneration,
    SocialQa,
    WritingImitation,
    PersonalizedCommenting,
    ItemSelection,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::ProfileGeneration,
        TaskKind::ScenarioGeneration,
        TaskKind::SocialQa,
        TaskKind::WritingImitation,
        TaskKind::PersonalizedCommenting,
        TaskKind::ItemSelection,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::ProfileGeneration => "profile_generation",
            TaskKind::ScenarioGeneration => "scenario_generation",
            TaskKind::SocialQa => "social_qa",
            TaskKind::WritingImitation => "writing_imitation",
            TaskKind::PersonalizedCommenting => "personalized_commenting",
            TaskKind::ItemSelection => "item_selection",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        TaskKind::ALL.iter().copied().find(|t| t.as_str() == s.trim())
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Speaker of one conversation turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnRole {
    System,
    Human,
    Assistant,
}

/// One conversation turn in the interchange format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub from: TurnRole,
    pub value: String,
}

/// One training sample: a conversation with exactly one assistant turn and
/// a per-turn loss mask that is true only there.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub sample_id: String,
    pub task: TaskKind,
    pub source: SourceKind,
    pub user_id: String,
    pub conversation: Vec<Turn>,
    pub loss_mask: Vec<bool>,
    /// Extra provenance carried into the serialized meta block.
    pub extra: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct WireMeta {
    task: TaskKind,
    source: SourceKind,
    user_id: String,
    loss_mask: Vec<bool>,
    #[serde(flatten)]
    extra: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Wire {
    id: String,
    conversations: Vec<Turn>,
    meta: WireMeta,
}

impl Serialize for TrainingSample {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        Wire {
            id: self.sample_id.clone(),
            conversations: self.conversation.clone(),
            meta: WireMeta {
                task: self.task,
                source: self.source,
                user_id: self.user_id.clone(),
                loss_mask: self.loss_mask.clone(),
                extra: self.extra.clone(),
            },
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TrainingSample {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let wire = Wire::deserialize(deserializer)?;
        Ok(TrainingSample {
            sample_id: wire.id,
            task: wire.meta.task,
            source: wire.meta.source,
            user_id: wire.meta.user_id,
            conversation: wire.conversations,
            loss_mask: wire.meta.loss_mask,
            extra: wire.meta.extra,
        })
    }
}

impl TrainingSample {
    /// The standard two-turn shape: one human prompt, one assistant target.
    fn two_turn(
        sample_id: String,
        task: TaskKind,
        source: SourceKind,
        user_id: String,
        human: String,
        assistant: String,
    ) -> TrainingSample {
        TrainingSample {
            sample_id,
            task,
            source,
            user_id,
            conversation: vec![
                Turn {
                    from: TurnRole::Human,
                    value: human,
                },
                Turn {
                    from: TurnRole::Assistant,
                    value: assistant,
                },
            ],
            loss_mask: vec![false, true],
            extra: BTreeMap::new(),
        }
    }

    /// Structural invariants: exactly one non-empty assistant turn, and the
    /// loss mask aligned with it.
    pub fn validate(&self) -> Result<()> {
        let assistants: Vec<&Turn> = self
            .conversation
            .iter()
            .filter(|t| t.from == TurnRole::Assistant)
            .collect();
        if assistants.len() != 1 {
            return Err(Error::data(format!(
                "sample {}: expected exactly one assistant turn, found {}",
                self.sample_id,
                assistants.len()
            )));
        }
        if assistants[0].value.trim().is_empty() {
            return Err(Error::data(format!(
                "sample {}: assistant turn is empty",
                self.sample_id
            )));
        }
        if self.loss_mask.len() != self.conversation.len() {
            return Err(Error::data(format!(
                "sample {}: loss mask length {} != {} turns",
                self.sample_id,
                self.loss_mask.len(),
                self.conversation.len()
            )));
        }
        for (turn, &masked) in self.conversation.iter().zip(&self.loss_mask) {
            if masked != (turn.from == TurnRole::Assistant) {
                return Err(Error::data(format!(
                    "sample {}: loss mask must be true exactly on assistant turns",
                    self.sample_id
                )));
            }
        }
        Ok(())
    }

    pub fn assistant_text(&self) -> &str {
        self.conversation
            .iter()
            .find(|t| t.from == TurnRole::Assistant)
            .map(|t| t.value.as_str())
            .unwrap_or("")
    }

    /// True when the assistant text does not occur verbatim inside any
    /// human or system turn.
    pub fn leakage_free(&self) -> bool {
        let target = self.assistant_text();
        !self
            .conversation
            .iter()
            .filter(|t| t.from != TurnRole::Assistant)
            .any(|t| t.value.contains(target))
    }
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

/// Persona in, detailed profile out.
pub fn build_profile_generation(d: &UserDossier, source: SourceKind) -> TrainingSample {
    let human = format!(
        "Below is a short persona describing a user.\n\n{}\n\nExpand this persona into a \
         detailed profile of the user, covering their interests, habits, relationships, and \
         background.",
        d.persona
    );
    TrainingSample::two_turn(
        format!("pg-{}", d.user_id),
        TaskKind::ProfileGeneration,
        source,
        d.user_id.clone(),
        human,
        d.profile.clone(),
    )
}

fn render_characters(s: &Scenario) -> String {
    s.characters
        .iter()
        .map(|c| format!("{}: {}", c.name, c.description))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Characters + background in, plots out.
pub fn build_scenario_generation(
    s: &Scenario,
    source: SourceKind,
    user_id: &str,
) -> TrainingSample {
    let human = format!(
        "Characters:\n{}\n\nBackground:\n{}\n\nReconstruct the complete story that unfolds in \
         this setting: what happens, in what order, and how it resolves.",
        render_characters(s),
        s.background
    );
    TrainingSample::two_turn(
        format!("sg-{}", s.scenario_id),
        TaskKind::ScenarioGeneration,
        source,
        user_id.to_string(),
        human,
        s.plots.clone(),
    )
}

/// Seeded 50/50 choice between grounding a sample in the persona or the
/// profile.
pub fn uses_persona(seed: u64, label: &str) -> bool {
    let mut rng = seeded_rng(seed, label);
    rng.gen_bool(0.5)
}

/// Persona-or-profile + scenario + question in, the user's answer out.
pub fn build_social_qa(
    d: &UserDossier,
    q: &SocialQA,
    source: SourceKind,
    seed: u64,
) -> TrainingSample {
    let persona_variant = uses_persona(seed, &format!("social-qa-variant:{}", q.qa_id));
    let (about_label, about) = if persona_variant {
        ("persona", d.persona.as_str())
    } else {
        ("profile", d.profile.as_str())
    };
    let kind = serde_json::to_value(q.kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    let human = format!(
        "About the user:\n{}\n\nScenario:\n{}\n\nQuestion ({}):\n{}\n\nAnswer the question the \
         way this user would.",
        about, q.scenario_text, kind, q.question
    );
    let mut sample = TrainingSample::two_turn(
        format!("sq-{}", q.qa_id),
        TaskKind::SocialQa,
        source,
        d.user_id.clone(),
        human,
        q.answer.clone(),
    );
    sample.extra.insert("qa_kind".to_string(), kind);
    sample.extra.insert("grounding".to_string(), about_label.to_string());
    sample
}

/// History-or-style + topic in, the held-out text out. `history` must not
/// contain the target; the most recent `HISTORY_WINDOW` entries are used.
pub fn build_writing_imitation(
    d: &UserDossier,
    target: &CleanRecord,
    history: &[CleanRecord],
    topic: &str,
    seed: u64,
) -> Result<TrainingSample> {
    if history.iter().any(|h| h.record_id == target.record_id) {
        return Err(Error::data(format!(
            "writing imitation: target {} present in history",
            target.record_id
        )));
    }
    let style_variant = uses_persona(seed, &format!("wi-variant:{}", target.record_id));
    let grounding = if style_variant || history.is_empty() {
        format!("The user's writing style:\n{}", d.writing_style)
    } else {
        let recent = &history[history.len().saturating_sub(HISTORY_WINDOW)..];
        let excerpts = recent
            .iter()
            .enumerate()
            .map(|(i, h)| format!("{}) {}", i + 1, h.rewritten_text))
            .collect::<Vec<_>>()
            .join("\n");
        format!("Earlier texts by the user:\n{excerpts}")
    };
    let human = format!(
        "{grounding}\n\nTopic: {topic}\n\nWrite a new text on this topic in this user's voice."
    );
    let mut sample = TrainingSample::two_turn(
        format!("wi-{}", target.record_id),
        TaskKind::WritingImitation,
        target.source,
        target.author_id.clone(),
        human,
        target.rewritten_text.clone(),
    );
    sample.extra.insert(
        "grounding".to_string(),
        if style_variant || history.is_empty() {
            "style".to_string()
        } else {
            "history".to_string()
        },
    );
    Ok(sample)
}

/// Prior comments + a new post in, the held-out comment out.
pub fn build_personalized_commenting(
    history: &[CleanRecord],
    target: &CleanRecord,
    new_post: &CleanRecord,
) -> Result<TrainingSample> {
    if history.is_empty() {
        return Err(Error::data("empty_history"));
    }
    let recent = &history[history.len().saturating_sub(HISTORY_WINDOW)..];
    let comments = recent
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}) {}", i + 1, c.rewritten_text))
        .collect::<Vec<_>>()
        .join("\n");
    let human = format!(
        "Earlier comments by the user:\n{}\n\nNew post:\n{}\n\nWrite the comment this user \
         would leave on the post.",
        comments, new_post.rewritten_text
    );
    let sample = TrainingSample::two_turn(
        format!("pc-{}", target.record_id),
        TaskKind::PersonalizedCommenting,
        target.source,
        target.author_id.clone(),
        human,
        target.rewritten_text.clone(),
    );
    Ok(sample)
}

/// One entry of the purchasable catalog.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CatalogItem {
    pub item_id: String,
    pub item_name: String,
}

pub fn option_letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

/// Interaction history + persona-or-profile + a lettered candidate list in,
/// the positive item's letter out. The candidate list holds the positive
/// plus `n - 1` seeded uniform negatives in seeded order.
pub fn build_item_selection(
    d: &UserDossier,
    history: &[CatalogItem],
    positive: &CatalogItem,
    pool: &[CatalogItem],
    n: usize,
    source: SourceKind,
    seed: u64,
) -> Result<TrainingSample> {
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
    if negatives.len() < n - 1 {
        return Err(Error::data("pool_too_small"));
    }
    let rng_label = format!("item-selection:{}:{}", d.user_id, positive.item_id);
    let mut rng = seeded_rng(seed, &rng_label);
    negatives.shuffle(&mut rng);
    negatives.truncate(n - 1);
    let mut candidates: Vec<&CatalogItem> = negatives;
    candidates.push(positive);
    candidates.shuffle(&mut rng);

    let gold_idx = candidates
        .iter()
        .position(|c| c.item_id == positive.item_id)
        .expect("positive is in candidates");
    let gold_label = option_letter(gold_idx);

    let persona_variant = uses_persona(seed, &format!("is-variant:{}:{}", d.user_id, positive.item_id));
    let about = if persona_variant { &d.persona } else { &d.profile };
    let history_lines = if history.is_empty() {
        "(none)".to_string()
    } else {
        history
            .iter()
            .map(|h| format!("- {}", h.item_name))
            .collect::<Vec<_>>()
            .join("\n")
    };
    // Candidates render as "A) name" in the prompt while the target answer
    // uses "A. name", so the full answer string never appears verbatim in
    // the prompt.
    let options = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}) {}", option_letter(i), c.item_name))
        .collect::<Vec<_>>()
        .join("\n");
    let human = format!(
        "About the user:\n{}\n\nItems the user engaged with before:\n{}\n\nCandidates:\n{}\n\n\
         Select the one candidate this user would most prefer. Reply with its letter and name.",
        about, history_lines, options
    );
    let assistant = format!("{}. {}", gold_label, positive.item_name);
    let mut sample = TrainingSample::two_turn(
        format!("is-{}-{}", d.user_id, positive.item_id),
        TaskKind::ItemSelection,
        source,
        d.user_id.clone(),
        human,
        assistant,
    );
    sample.extra.insert("gold_label".to_string(), gold_label.to_string());
    Ok(sample)
}

// ---------------------------------------------------------------------------
// Balancing, splitting, mixing
// ---------------------------------------------------------------------------

/// Seeded uniform downsampling to at most `quota` samples per
/// (task, source) cell. A cell with fewer samples than the quota keeps all
/// of them (with a warning).
pub fn sample_balanced(samples: &[TrainingSample], quota: usize, seed: u64) -> Vec<TrainingSample> {
    let mut cells: BTreeMap<(TaskKind, SourceKind), Vec<&TrainingSample>> = BTreeMap::new();
    for s in samples {
        cells.entry((s.task, s.source)).or_default().push(s);
    }
    let mut out = Vec::new();
    for ((task, source), mut cell) in cells {
        cell.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        if cell.len() < quota {
            log::warn!(
                "balance: cell ({task}, {source}) has {} < quota {quota}; keeping all",
                cell.len()
            );
        }
        if cell.len() > quota {
            let mut rng = seeded_rng(seed, &format!("balance:{task}:{source}"));
            cell.shuffle(&mut rng);
            cell.truncate(quota);
            cell.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        }
        out.extend(cell.into_iter().cloned());
    }
    out
}

/// Splits by user: every sample of a user lands on the same side, chosen by
/// a seeded hash of the user id against `test_fraction`.
pub fn split_train_test(
    corpus: Vec<TrainingSample>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<TrainingSample>, Vec<TrainingSample>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for sample in corpus {
        let h = derive_seed(seed, &format!("split:{}", sample.user_id));
        let unit = h as f64 / u64::MAX as f64;
        if unit < test_fraction {
            test.push(sample);
        } else {
            train.push(sample);
        }
    }
    Ok((train, test))
}

/// Mixes the task corpus with two general-purpose corpora at the given
/// ratio (general-a : general-b : tasks). Component sizes land within one
/// sample of the exact ratio; the result order is a seeded shuffle.
pub fn mix_general(
    corpus: Vec<TrainingSample>,
    general_a: Vec<TrainingSample>,
    general_b: Vec<TrainingSample>,
    ratio: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<TrainingSample>> {
    let (ra, rb, rc) = ratio;
    if ra <= 0.0 || rb <= 0.0 || rc <= 0.0 || (ra + rb + rc - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "mix ratio components must be positive and sum to 1, got {ra}:{rb}:{rc}"
        )));
    }
    let total = (corpus.len() as f64 / rc).round() as usize;
    let want_a = (total as f64 * ra).round() as usize;
    let want_b = (total as f64 * rb).round() as usize;
    let want_c = (total - want_a - want_b).min(corpus.len());
    if want_a > general_a.len() || want_b > general_b.len() {
        return Err(Error::data(format!(
            "mix: need {want_a}+{want_b} general samples, have {}+{}",
            general_a.len(),
            general_b.len()
        )));
    }
    let pick = |mut set: Vec<TrainingSample>, want: usize, label: &str| -> Vec<TrainingSample> {
        set.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let mut rng = seeded_rng(seed, label);
        set.shuffle(&mut rng);
        set.truncate(want);
        set
    };
    let mut out = pick(general_a, want_a, "mix:general-a");
    out.extend(pick(general_b, want_b, "mix:general-b"));
    out.extend(pick(corpus, want_c, "mix:tasks"));
    let mut rng = seeded_rng(seed, "mix:order");
    out.shuffle(&mut rng);
    Ok(out)
}

/// Writes the downstream fine-tuning recipe next to the emitted corpus.
pub fn write_training_config(path: &Path) -> Result<()> {
    let doc = "\
# Training configuration

Fine-tuning recipe for the emitted conversation corpus. The corpus is in
ShareGPT-style format; train with next-token prediction and mask every
non-response position out of the loss (the per-turn `loss_mask` in each
sample's meta block marks the response turns).

| Setting                | Value   |
|------------------------|---------|
| Learning rate          | 5e-6    |
| Total batch size       | 64      |
| Max sequence length    | 8192    |
| LR scheduler           | cosine  |
| Warm-up ratio          | 0.5     |
| Epochs                 | 3       |
| Tuning mode            | full fine-tune |

Serving the tuned checkpoint is unchanged from the base model; sampling
temperature 0.7 is the evaluation default.
";
    std::fs::write(path, doc).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::RawRecord;
    use crate::synthesis::{CharacterEntry, QaKind, StoryEntry};

    fn dossier(user: &str) -> UserDossier {
        UserDossier {
            user_id: user.to_string(),
            persona: format!("{user} is a patient tinkerer who writes long notes."),
            profile: format!(
                "{user} spends weekends dismantling small appliances and documenting each step \
                 in a shared notebook. {}",
                "They favor precise language and dry humor. ".repeat(30)
            ),
            stories: vec![StoryEntry {
                summary: "fixed a neighbor's radio".into(),
                narrative: "It took three evenings and a swap meet part.".into(),
            }],
            writing_style: "Short declarative sentences, occasional parentheticals.".into(),
        }
    }

    fn clean(id: &str, user: &str, ts: i64, text: &str) -> CleanRecord {
        let raw: RawRecord = serde_json::from_value(serde_json::json!({
            "record_id": id,
            "source": "reddit",
            "author_id": user,
            "timestamp": ts,
            "text": text,
            "meta": {"score": 3, "num_comments": 3, "author_flags": []}
        }))
        .unwrap();
        CleanRecord::from_raw(raw, text.to_string())
    }

    fn scenario() -> Scenario {
        Scenario {
            scenario_id: "rec-1-sc0".into(),
            source_record_id: "rec-1".into(),
            background: "A rainy street market at closing time.".into(),
            characters: vec![
                CharacterEntry {
                    name: "Vendor".into(),
                    description: "packing up unsold fruit".into(),
                },
                CharacterEntry {
                    name: "Late customer".into(),
                    description: "looking for a bargain".into(),
                },
            ],
            plots: "The vendor trades the last crate for help folding the stall.".into(),
        }
    }

    fn qa() -> SocialQA {
        SocialQA {
            qa_id: "rec-1-qa0".into(),
            source_record_id: "rec-1".into(),
            scenario_text: "A friend cancels plans at the last minute.".into(),
            question: "What does the user do next?".into(),
            answer: "Shrugs it off and reschedules for the weekend.".into(),
            kind: QaKind::NextAction,
        }
    }

    fn catalog(n: usize) -> Vec<CatalogItem> {
        (0..n)
            .map(|i| CatalogItem {
                item_id: format!("item-{i:03}"),
                item_name: format!("Widget {i:03}"),
            })
            .collect()
    }

    #[test]
    fn profile_generation_sample_shape() {
        let d = dossier("u1");
        let s = build_profile_generation(&d, SourceKind::Reddit);
        s.validate().unwrap();
        assert_eq!(s.assistant_text(), d.profile);
        let human = &s.conversation[0].value;
        assert!(human.contains(&d.persona));
        assert!(!human.contains(&d.profile));
        assert!(s.leakage_free());
    }

    #[test]
    fn profile_generation_ids_unique_over_100_dossiers() {
        let ids: BTreeSet<String> = (0..100)
            .map(|i| build_profile_generation(&dossier(&format!("u{i}")), SourceKind::Blogger).sample_id)
            .collect();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn scenario_generation_renders_characters_in_order() {
        let sc = scenario();
        let s = build_scenario_generation(&sc, SourceKind::Twitter, "u9");
        s.validate().unwrap();
        assert_eq!(s.assistant_text(), sc.plots);
        let human = &s.conversation[0].value;
        assert!(!human.contains(&sc.plots));
        let vendor = human.find("Vendor: packing up unsold fruit").unwrap();
        let customer = human.find("Late customer: looking for a bargain").unwrap();
        assert!(vendor < customer, "characters out of declared order");
        assert!(s.leakage_free());
    }

    #[test]
    fn social_qa_variants_are_seed_pinned() {
        let d = dossier("u1");
        let q = qa();
        // Derived once from the seeded chooser and pinned: seed 0 grounds
        // this qa in the persona, seed 5 in the profile.
        let persona_seed = 0;
        let profile_seed = 5;
        assert!(uses_persona(persona_seed, "social-qa-variant:rec-1-qa0"));
        assert!(!uses_persona(profile_seed, "social-qa-variant:rec-1-qa0"));

        let sp = build_social_qa(&d, &q, SourceKind::Reddit, persona_seed);
        assert!(sp.conversation[0].value.contains(&d.persona));
        assert!(!sp.conversation[0].value.contains(&d.profile));
        assert_eq!(sp.extra["grounding"], "persona");

        let sf = build_social_qa(&d, &q, SourceKind::Reddit, profile_seed);
        assert!(sf.conversation[0].value.contains(&d.profile));
        assert_eq!(sf.extra["grounding"], "profile");

        for s in [&sp, &sf] {
            s.validate().unwrap();
            assert!(s.leakage_free());
            assert_eq!(s.extra["qa_kind"], "next_action");
            assert_eq!(s.assistant_text(), q.answer);
        }
    }

    #[test]
    fn writing_imitation_history_variant_excludes_target() {
        let d = dossier("u1");
        let history: Vec<CleanRecord> = (0..5)
            .map(|i| clean(&format!("h{i}"), "u1", i, &format!("history text number {i}")))
            .collect();
        let target = clean("t1", "u1", 99, "the brand new target text");
        // Find a seed giving the history variant for this target id.
        let seed = (0..64)
            .find(|&s| !uses_persona(s, "wi-variant:t1"))
            .expect("some seed yields history variant");
        let s = build_writing_imitation(&d, &target, &history, "weekend projects", seed).unwrap();
        s.validate().unwrap();
        let human = &s.conversation[0].value;
        assert_eq!(s.extra["grounding"], "history");
        // Only the most recent window appears.
        assert!(human.contains("history text number 4"));
        assert!(human.contains("history text number 2"));
        assert!(!human.contains("history text number 1"));
        assert!(!human.contains("the brand new target text"));
        assert!(human.contains("Topic: weekend projects"));
        assert_eq!(s.assistant_text(), "the brand new target text");
        assert!(s.leakage_free());
    }

    #[test]
    fn writing_imitation_style_variant_uses_writing_style() {
        let d = dossier("u1");
        let history: Vec<CleanRecord> =
            (0..3).map(|i| clean(&format!("h{i}"), "u1", i, "old text")).collect();
        let target = clean("t2", "u1", 99, "another target");
        let seed = (0..64)
            .find(|&s| uses_persona(s, "wi-variant:t2"))
            .expect("some seed yields style variant");
        let s = build_writing_imitation(&d, &target, &history, "a topic", seed).unwrap();
        assert_eq!(s.extra["grounding"], "style");
        assert!(s.conversation[0].value.contains(&d.writing_style));
        assert!(!s.conversation[0].value.contains("old text"));
    }

    #[test]
    fn writing_imitation_rejects_target_in_history() {
        let d = dossier("u1");
        let target = clean("t1", "u1", 99, "text");
        let history = vec![clean("t1", "u1", 1, "text")];
        let err = build_writing_imitation(&d, &target, &history, "x", 0).unwrap_err();
        assert!(err.to_string().contains("t1"));
    }

    #[test]
    fn commenting_builds_from_history_and_post() {
        let history: Vec<CleanRecord> = (0..3)
            .map(|i| clean(&format!("c{i}"), "u1", i, &format!("comment number {i}")))
            .collect();
        let target = clean("c9", "u1", 50, "the held out comment");
        let post = clean("p1", "someone_else", 40, "a new post about sourdough");
        let s = build_personalized_commenting(&history, &target, &post).unwrap();
        s.validate().unwrap();
        assert_eq!(s.task, TaskKind::PersonalizedCommenting);
        assert_eq!(s.user_id, "u1");
        assert_eq!(s.assistant_text(), "the held out comment");
        let human = &s.conversation[0].value;
        assert!(human.contains("comment number 2"));
        assert!(human.contains("a new post about sourdough"));
        assert!(!human.contains("the held out comment"));
        assert!(s.leakage_free());
    }

    #[test]
    fn commenting_empty_history_is_an_error() {
        let target = clean("c9", "u1", 50, "comment");
        let post = clean("p1", "u2", 40, "post");
        let err = build_personalized_commenting(&[], &target, &post).unwrap_err();
        assert!(err.to_string().contains("empty_history"));
    }

    #[test]
    fn item_selection_candidates_and_gold() {
        let d = dossier("u1");
        let pool = catalog(100);
        let history = pool[..5].to_vec();
        let positive = pool[50].clone();
        let s = build_item_selection(
            &d,
            &history,
            &positive,
            &pool,
            ITEM_SELECTION_CANDIDATES,
            SourceKind::Amazon,
            7,
        )
        .unwrap();
        s.validate().unwrap();
        let human = &s.conversation[0].value;
        // Exactly 20 lettered candidates, labels consecutive from A.
        for i in 0..20 {
            assert!(
                human.contains(&format!("\n{}) ", option_letter(i)))
                    || human.contains(&format!("Candidates:\n{}) ", option_letter(i))),
                "missing option {}",
                option_letter(i)
            );
        }
        assert!(!human.contains("\nU) "), "more than 20 options");
        // Positive appears exactly once among candidates.
        let occurrences = human.matches(&positive.item_name).count();
        assert_eq!(occurrences, 1, "positive must appear exactly once");
        // History items are excluded from candidates.
        for h in &history {
            let in_candidates = human
                .split("Candidates:")
                .nth(1)
                .unwrap()
                .contains(&h.item_name);
            assert!(!in_candidates, "history item {} leaked into candidates", h.item_name);
        }
        // Assistant = "<letter>. <name>" and the gold letter points at it.
        let gold = s.extra["gold_label"].chars().next().unwrap();
        assert_eq!(s.assistant_text(), format!("{}. {}", gold, positive.item_name));
        assert!(human.contains(&format!("{}) {}", gold, positive.item_name)));
        assert!(s.leakage_free());
    }

    #[test]
    fn item_selection_same_seed_same_negatives() {
        let d = dossier("u1");
        let pool = catalog(100);
        let positive = pool[50].clone();
        let one = build_item_selection(&d, &[], &positive, &pool, 20, SourceKind::Amazon, 3).unwrap();
        let two = build_item_selection(&d, &[], &positive, &pool, 20, SourceKind::Amazon, 3).unwrap();
        assert_eq!(one, two);
        let other_seed =
            build_item_selection(&d, &[], &positive, &pool, 20, SourceKind::Amazon, 4).unwrap();
        assert_ne!(
            one.conversation[0].value, other_seed.conversation[0].value,
            "different seed should pick different negatives or order"
        );
    }

    #[test]
    fn item_selection_pool_too_small() {
        let d = dossier("u1");
        let pool = catalog(10);
        let positive = pool[0].clone();
        let err = build_item_selection(&d, &[], &positive, &pool, 20, SourceKind::Amazon, 0)
            .unwrap_err();
        assert!(err.to_string().contains("pool_too_small"));
    }

    fn mini_corpus(users: usize, per_user: usize) -> Vec<TrainingSample> {
        let mut out = Vec::new();
        for u in 0..users {
            let d = dossier(&format!("user{u:04}"));
            for k in 0..per_user {
                let mut s = build_profile_generation(&d, SourceKind::Reddit);
                s.sample_id = format!("pg-{}-{k}", d.user_id);
                out.push(s);
            }
        }
        out
    }

    #[test]
    fn balance_downsamples_per_cell_deterministically() {
        let corpus = mini_corpus(10, 1);
        let five = sample_balanced(&corpus, 5, 41);
        assert_eq!(five.len(), 5);
        assert_eq!(five, sample_balanced(&corpus, 5, 41));
        let other = sample_balanced(&corpus, 5, 42);
        assert_eq!(other.len(), 5);
        assert_ne!(
            five.iter().map(|s| &s.sample_id).collect::<Vec<_>>(),
            other.iter().map(|s| &s.sample_id).collect::<Vec<_>>(),
        );
    }

    #[test]
    fn balance_clamps_when_short() {
        let corpus = mini_corpus(7, 1);
        let got = sample_balanced(&corpus, 10, 1);
        assert_eq!(got.len(), 7, "short cell keeps everything");
    }

    #[test]
    fn split_is_disjoint_by_user_and_seed_stable() {
        let corpus = mini_corpus(1000, 2);
        let (train, test) = split_train_test(corpus.clone(), 0.5, 9).unwrap();
        assert_eq!(train.len() + test.len(), corpus.len());
        let train_users: BTreeSet<&str> = train.iter().map(|s| s.user_id.as_str()).collect();
        let test_users: BTreeSet<&str> = test.iter().map(|s| s.user_id.as_str()).collect();
        assert!(train_users.is_disjoint(&test_users));
        // Half split over 1000 users: seeded hash keeps it well inside
        // [400, 600] users a side.
        assert!((400..=600).contains(&test_users.len()), "{}", test_users.len());
        let (train2, test2) = split_train_test(corpus, 0.5, 9).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
    }

    #[test]
    fn split_rejects_degenerate_fraction() {
        assert!(split_train_test(mini_corpus(2, 1), 0.0, 1).is_err());
        assert!(split_train_test(mini_corpus(2, 1), 1.0, 1).is_err());
    }

    #[test]
    fn default_test_fraction_matches_documented_counts() {
        // 132,869 of 1,328,586 total ≈ 0.1000, the default split fraction.
        let test = 132_869f64;
        let train = 1_195_717f64;
        let fraction = test / (test + train);
        assert!((fraction - 0.10).abs() < 0.0005, "{fraction}");
    }

    #[test]
    fn mix_hits_ratio_within_one() {
        let corpus = mini_corpus(500, 1);
        let mut general_a = mini_corpus(400, 1);
        for s in &mut general_a {
            s.sample_id = format!("ga-{}", s.sample_id);
        }
        let mut general_b = mini_corpus(400, 1);
        for s in &mut general_b {
            s.sample_id = format!("gb-{}", s.sample_id);
        }
        let mixed = mix_general(
            corpus,
            general_a,
            general_b,
            (0.25, 0.25, 0.5),
            17,
        )
        .unwrap();
        assert!((999..=1001).contains(&mixed.len()), "{}", mixed.len());
        let count_a = mixed.iter().filter(|s| s.sample_id.starts_with("ga-")).count();
        let count_b = mixed.iter().filter(|s| s.sample_id.starts_with("gb-")).count();
        let count_c = mixed.len() - count_a - count_b;
        assert!((249..=251).contains(&count_a), "{count_a}");
        assert!((249..=251).contains(&count_b), "{count_b}");
        assert!((499..=501).contains(&count_c), "{count_c}");
    }

    #[test]
    fn mix_rejects_bad_ratio_and_is_seed_stable() {
        let err = mix_general(
            mini_corpus(4, 1),
            mini_corpus(4, 1),
            mini_corpus(4, 1),
            (0.3, 0.3, 0.3),
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("sum to 1"));

        let again = || {
            mix_general(
                mini_corpus(50, 1),
                mini_corpus(40, 1).into_iter().map(|mut s| { s.sample_id = format!("a-{}", s.sample_id); s }).collect(),
                mini_corpus(40, 1).into_iter().map(|mut s| { s.sample_id = format!("b-{}", s.sample_id); s }).collect(),
                (0.25, 0.25, 0.5),
                5,
            )
            .unwrap()
        };
        assert_eq!(again(), again());
    }

    #[test]
    fn sharegpt_wire_shape_round_trips() {
        let d = dossier("u1");
        let s = build_social_qa(&d, &qa(), SourceKind::Reddit, 11);
        s.validate().unwrap();
        let json = serde_json::to_value(&s).unwrap();
        assert_eq!(json["id"], serde_json::json!(s.sample_id));
        assert_eq!(json["conversations"][0]["from"], "human");
        assert_eq!(json["conversations"][1]["from"], "assistant");
        assert_eq!(json["meta"]["task"], "social_qa");
        assert_eq!(json["meta"]["source"], "reddit");
        assert_eq!(json["meta"]["user_id"], "u1");
        assert_eq!(json["meta"]["loss_mask"], serde_json::json!([false, true]));
        assert_eq!(json["meta"]["qa_kind"], "next_action");
        let back: TrainingSample = serde_json::from_value(json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn validate_catches_broken_masks_and_turn_counts() {
        let d = dossier("u1");
        let mut s = build_profile_generation(&d, SourceKind::Reddit);
        s.loss_mask = vec![true, true];
        assert!(s.validate().is_err());

        let mut s2 = build_profile_generation(&d, SourceKind::Reddit);
        s2.conversation.push(Turn {
            from: TurnRole::Assistant,
            value: "second answer".into(),
        });
        s2.loss_mask.push(true);
        assert!(s2.validate().is_err());

        let mut s3 = build_profile_generation(&d, SourceKind::Reddit);
        s3.conversation[1].value = "  ".into();
        assert!(s3.validate().is_err());
    }

    #[test]
    fn training_config_doc_is_emitted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("training-config.md");
        write_training_config(&path).unwrap();
        let doc = std::fs::read_to_string(&path).unwrap();
        for needle in ["5e-6", "64", "8192", "cosine", "0.5", "3", "loss_mask"] {
            assert!(doc.contains(needle), "missing {needle}");
        }
    }
}

