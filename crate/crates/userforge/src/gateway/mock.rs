//! Deterministic mock backend.
//!
//! Resolution order for a request:
//! 1. **Fixture** — a file named `<request digest>.txt` in the fixtures
//!    directory, for tests that pin exact responses.
//! 2. **Synthetic responder** — when a message carries a `[[task:...]]`
//!    marker (every builtin template does), a schema-valid response is
//!    generated for that task, seeded entirely by the request digest. This
//!    is what lets the full pipeline run offline: rewrites actually strip
//!    markup, personas respect word budgets, QC scores gate realistic
//!    fractions of artifacts.
//! 3. **Echo** — a digest-stamped placeholder, so unknown prompts still get
//!    a deterministic reply.
//!
//! Every layer is a pure function of the request bytes, so two runs — on
//! any platform — produce identical responses.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use crate::error::{Error, Result};
use crate::seeding;
use crate::templates::{delimited_segments, task_marker};

use super::{AttemptError, Backend, ChatRequest, Completion};

pub struct MockBackend {
    fixtures_dir: PathBuf,
}

impl MockBackend {
    pub fn new(fixtures_dir: impl Into<PathBuf>) -> Result<Self> {
        let fixtures_dir = fixtures_dir.into();
        if !fixtures_dir.is_dir() {
            return Err(Error::config(format!(
                "mock fixtures_dir is not a directory: {}",
                fixtures_dir.display()
            )));
        }
        Ok(MockBackend { fixtures_dir })
    }

    /// Where a canned response for `digest` would live.
    pub fn fixture_path(&self, digest: &str) -> PathBuf {
        self.fixtures_dir.join(format!("{digest}.txt"))
    }
}

impl Backend for MockBackend {
    fn complete_once(&self, req: &ChatRequest) -> std::result::Result<Completion, AttemptError> {
        let digest = req.digest();
        let fixture = self.fixture_path(&digest);
        if fixture.exists() {
            let content = std::fs::read_to_string(&fixture)
                .map_err(|e| AttemptError::Fatal(format!("fixture {}: {e}", fixture.display())))?;
            return Ok(Completion {
                content,
                finish_reason: "stop".to_string(),
            });
        }
        let prompt: String = req
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let content = req
            .messages
            .iter()
            .find_map(|m| task_marker(&m.content))
            .and_then(|marker| synth::respond(marker, &prompt, &digest))
            .unwrap_or_else(|| format!("mock-echo {digest}"));
        Ok(Completion {
            content,
            finish_reason: "stop".to_string(),
        })
    }
}

/// Schema-valid synthetic responses, seeded by request digest.
mod synth {
    use super::*;

    pub fn respond(marker: &str, prompt: &str, digest: &str) -> Option<String> {
        match marker {
            "rewrite" => Some(rewrite(prompt)),
            "score" => Some(score(digest)),
            "persona" => Some(persona(prompt, digest)),
            "profile" => Some(profile(prompt, digest)),
            "stories" => Some(stories(prompt, digest)),
            "writing_style" => Some(writing_style(prompt, digest)),
            "scenario" => Some(scenario(prompt, digest)),
            "social_qa" => Some(social_qa(prompt, digest)),
            "qc" => Some(qc(prompt, digest)),
            "distractor" => Some(distractor(prompt, digest)),
            "judge" => Some(judge(prompt, digest)),
            "answer_mcq" => Some(answer_mcq(prompt, digest)),
            "topic_summary" => Some(topic_summary(prompt)),
            _ => None,
        }
    }

    fn rng_for(digest: &str, label: &str) -> ChaCha8Rng {
        let head = digest.get(..16).unwrap_or(digest);
        let seed = u64::from_str_radix(head, 16).unwrap_or(0x5EED);
        seeding::seeded_rng(seed, label)
    }

    fn first_segment(prompt: &str) -> String {
        delimited_segments(prompt).into_iter().next().unwrap_or_default()
    }

    const STOPWORDS: &[&str] = &[
        "about", "above", "after", "again", "along", "around", "because", "before", "being",
        "between", "could", "every", "going", "having", "little", "might", "never", "other",
        "really", "right", "should", "since", "still", "their", "there", "these", "thing",
        "things", "think", "those", "today", "under", "until", "where", "which", "while",
        "would", "years",
    ];

    /// Distinct interesting words of the material, in order of first
    /// appearance — the hook that keeps synthetic prose anchored to its
    /// actual input.
    fn content_words(text: &str, limit: usize) -> Vec<String> {
        let mut seen: BTreeSet<String> = BTreeSet::new();
        let mut words = Vec::new();
        for raw in text.split(|c: char| !c.is_alphanumeric()) {
            let w = raw.to_ascii_lowercase();
            if w.len() >= 5
                && w.chars().all(|c| c.is_ascii_alphabetic())
                && !STOPWORDS.contains(&w.as_str())
                && seen.insert(w.clone())
            {
                words.push(w);
                if words.len() == limit {
                    break;
                }
            }
        }
        if words.is_empty() {
            words.push("routines".to_string());
        }
        words
    }

    fn word(words: &[String], i: usize) -> &str {
        &words[i % words.len()]
    }

    fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
        pool[rng.gen_range(0..pool.len())]
    }

    fn word_count(text: &str) -> usize {
        text.split_whitespace().count()
    }

    const ADJECTIVES: &[&str] = &[
        "meticulous", "wry", "earnest", "restless", "pragmatic", "wistful", "blunt", "curious",
        "patient", "skeptical", "stubborn", "generous",
    ];
    const NAMES: &[&str] = &[
        "Avery", "Jordan", "Riley", "Morgan", "Casey", "Quinn", "Harper", "Rowan",
    ];

    fn url_re() -> &'static Regex {
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| Regex::new(r"(?:https?://|www\.)\S+").unwrap())
    }

    fn tag_re() -> &'static Regex {
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| Regex::new(r"<[^<>]*>").unwrap())
    }

    fn handle_re() -> &'static Regex {
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| Regex::new(r"[#@][A-Za-z0-9_]+").unwrap())
    }

    /// A line is treated as non-English when over 30% of its non-space
    /// characters fall outside ASCII.
    fn is_non_english(line: &str) -> bool {
        let total = line.chars().filter(|c| !c.is_whitespace()).count();
        if total == 0 {
            return false;
        }
        let non_ascii = line.chars().filter(|c| !c.is_ascii()).count();
        non_ascii * 10 > total * 3
    }

    /// Deterministic stand-in for the rewrite model: strips markup, URLs,
    /// hashtags/mentions, and non-English lines, then normalizes spacing.
    pub fn clean_text(text: &str) -> String {
        let no_tags = tag_re().replace_all(text, " ");
        let no_urls = url_re().replace_all(&no_tags, " ");
        let no_handles = handle_re().replace_all(&no_urls, " ");
        no_handles
            .lines()
            .filter(|line| !is_non_english(line))
            .map(|line| line.split_whitespace().collect::<Vec<_>>().join(" "))
            .filter(|line| !line.is_empty())
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn rewrite(prompt: &str) -> String {
        clean_text(&first_segment(prompt))
    }

    fn score(digest: &str) -> String {
        let mut rng = rng_for(digest, "mock.score");
        let roll: f64 = rng.gen();
        let quality = if roll < 0.90 {
            "high"
        } else if roll < 0.97 {
            "medium"
        } else {
            "low"
        };
        let harmful = rng.gen_bool(0.02);
        format!("```\nquality: {quality}\nharmful: {harmful}\n```")
    }

    fn persona(prompt: &str, digest: &str) -> String {
        let words = content_words(&first_segment(prompt), 8);
        let mut rng = rng_for(digest, "mock.persona");
        let a1 = pick(&mut rng, ADJECTIVES);
        let a2 = pick(&mut rng, ADJECTIVES);
        let a3 = pick(&mut rng, ADJECTIVES);
        format!(
            "A {a1} regular who keeps coming back to {} and {}. Friends would call them {a2} yet \
             {a3}, quick with an opinion on {} and slow to drop a plan once made. Behind the \
             habits sits someone who treats {} as a measure of character and writes all of it \
             down.",
            word(&words, 0),
            word(&words, 1),
            word(&words, 2),
            word(&words, 3),
        )
    }

    fn profile(prompt: &str, digest: &str) -> String {
        let words = content_words(&first_segment(prompt), 12);
        let mut rng = rng_for(digest, "mock.profile");
        let a1 = pick(&mut rng, ADJECTIVES);
        let a2 = pick(&mut rng, ADJECTIVES);
        let sentences = [
            format!(
                "This is a {a1} person whose days are organized, more than they would admit, \
                 around {} and the small rituals attached to it.",
                word(&words, 0)
            ),
            format!(
                "Their background shows through in the way they talk about {}: practical detail \
                 first, feelings later, and always a note about what they would do differently.",
                word(&words, 1)
            ),
            format!(
                "Interests cluster around {}, {}, and anything that rewards patience over flash.",
                word(&words, 2),
                word(&words, 3)
            ),
            format!(
                "Habits are steady: early starts, long walks while thinking through {}, and a \
                 running list of small fixes that never quite empties.",
                word(&words, 4)
            ),
            format!(
                "With people they are {a2} — loyal to a small circle, slow to trust strangers, \
                 and generous once the trust is earned."
            ),
            format!(
                "Conversations keep returning to {}, which works as both hobby and escape valve \
                 when the week runs long.",
                word(&words, 5)
            ),
            format!(
                "Their outlook is level: plans are made in pencil, complaints are rationed, and \
                 progress on {} counts for more than talk about it.",
                word(&words, 6)
            ),
            format!(
                "What stays constant is the record-keeping — every episode involving {} ends up \
                 written down, compared with the last one, and mined for the next plan.",
                word(&words, 7)
            ),
        ];
        let mut out = String::new();
        let mut idx = 0;
        while word_count(&out) < 115 {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(&sentences[idx % sentences.len()]);
            idx += 1;
        }
        out
    }

    fn stories(prompt: &str, digest: &str) -> String {
        let words = content_words(&first_segment(prompt), 8);
        let mut rng = rng_for(digest, "mock.stories");
        let count = rng.gen_range(1..=2usize);
        let mut blocks = Vec::new();
        for i in 0..count {
            let name = pick(&mut rng, NAMES);
            let adj = pick(&mut rng, ADJECTIVES);
            let day = pick(&mut rng, &["Tuesday", "Saturday", "Monday", "Friday"]);
            blocks.push(format!(
                "summary: The time {name} finally dealt with {}.\nnarrative: It began on an \
                 otherwise ordinary {day}. {name} had been putting off anything involving {} for \
                 weeks, and it showed. When the moment came they handled it with more {adj} calm \
                 than anyone expected, and the story still comes up whenever {} is mentioned.",
                word(&words, 2 * i),
                word(&words, 2 * i),
                word(&words, 2 * i + 1),
            ));
        }
        blocks.join("\n---\n")
    }

    fn writing_style(prompt: &str, digest: &str) -> String {
        let words = content_words(&first_segment(prompt), 4);
        let mut rng = rng_for(digest, "mock.style");
        let rhythm = pick(&mut rng, &["long and winding", "short and clipped"]);
        let lexicon = pick(&mut rng, &["plain", "ornate"]);
        let tone = pick(&mut rng, &["dry", "warm", "deadpan"]);
        let ending = pick(&mut rng, &["an open question", "a flat verdict"]);
        format!(
            "Sentences tend to run {rhythm}, with frequent asides and a habit of circling back \
             to {}. The vocabulary leans {lexicon}, the tone stays {tone}, and most pieces close \
             on {ending}.",
            word(&words, 0)
        )
    }

    fn scenario(prompt: &str, digest: &str) -> String {
        let words = content_words(&first_segment(prompt), 6);
        let mut rng = rng_for(digest, "mock.scenario");
        let when = pick(&mut rng, &["A weekday evening", "A slow Sunday", "Late one Friday"]);
        let place = pick(
            &mut rng,
            &["at the kitchen table", "in a crowded meetup room", "on the back porch"],
        );
        let n1 = pick(&mut rng, NAMES);
        let mut n2 = pick(&mut rng, NAMES);
        while n2 == n1 {
            n2 = pick(&mut rng, NAMES);
        }
        let role = pick(&mut rng, &["a neighbor", "an old friend", "a coworker"]);
        let adj = pick(&mut rng, ADJECTIVES);
        format!(
            "```\nbackground: {when} {place}, not long after {} had come up again.\ncharacters:\n\
             - {n1}: the narrator, {adj} about {}\n- {n2}: {role}, unconvinced\nplots: {n1} \
             raises {} and will not let it rest. {n2} pushes back with a story about {}. Voices \
             rise, someone laughs at the wrong moment, and the night ends with the two agreeing \
             to settle it over {} next week.\n```",
            word(&words, 0),
            word(&words, 1),
            word(&words, 0),
            word(&words, 2),
            word(&words, 3),
        )
    }

    fn social_qa(prompt: &str, digest: &str) -> String {
        let words = content_words(&first_segment(prompt), 6);
        let mut rng = rng_for(digest, "mock.social_qa");
        let requested = Regex::new(r"up to (\d+)")
            .unwrap()
            .captures(prompt)
            .and_then(|c| c[1].parse::<usize>().ok())
            .unwrap_or(3);
        let mut kinds = ["next_action", "inner_state", "social_reasoning"];
        kinds.shuffle(&mut rng);
        let count = rng.gen_range(2..=3usize).min(requested.max(1));
        let name = pick(&mut rng, NAMES);
        let mut blocks = Vec::new();
        for kind in kinds.iter().take(count) {
            let topic = word(&words, blocks.len());
            let detail = word(&words, blocks.len() + 1);
            let scenario = format!(
                "{name} has spent the week wrapped up in {topic}, and tonight the group finally \
                 asks about it. All eyes are on {name} as the question lands."
            );
            let (question, answer) = match *kind {
                "next_action" => (
                    format!("What does {name} do next?"),
                    format!(
                        "{name} offers to walk everyone through {detail} step by step the next \
                         morning."
                    ),
                ),
                "inner_state" => (
                    format!("What is {name} feeling as the question lands?"),
                    format!(
                        "A mix of pride and nerves, since {detail} took longer to finish than \
                         {name} will admit."
                    ),
                ),
                _ => (
                    format!("Why does the group press {name} about {topic}?"),
                    format!(
                        "Because {name} has a track record with {detail}, and the group trusts \
                         results over talk."
                    ),
                ),
            };
            blocks.push(format!(
                "scenario: {scenario}\nquestion: {question}\nanswer: {answer}\nkind: {kind}"
            ));
        }
        blocks.join("\n---\n")
    }

    fn prompt_field<'a>(prompt: &'a str, key: &str) -> Option<&'a str> {
        prompt
            .lines()
            .find_map(|line| line.strip_prefix(&format!("{key}: ")))
            .map(str::trim)
    }

    fn metric_list(prompt: &str) -> Vec<String> {
        prompt_field(prompt, "metrics")
            .map(|raw| {
                raw.split(',')
                    .map(|m| m.trim().to_string())
                    .filter(|m| !m.is_empty())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Pass probabilities tuned so a realistic share of each artifact kind
    /// survives the gate: dossier parts mostly pass (a user needs all four),
    /// scenarios are culled hardest, social QA in between.
    fn qc(prompt: &str, digest: &str) -> String {
        let kind = prompt_field(prompt, "kind").unwrap_or("unknown").to_string();
        let metrics = metric_list(prompt);
        let pass_p = match kind.as_str() {
            "persona" | "profile" | "stories" | "writing_style" => 0.92,
            "scenario" => 0.40,
            "social_qa" => 0.60,
            _ => 0.80,
        };
        let mut rng = rng_for(digest, "mock.qc");
        let pass = rng.gen_bool(pass_p);
        let fail_overall = rng.gen_bool(0.5);
        let other_count = metrics.iter().filter(|m| *m != "overall").count();
        let failing_other = if other_count > 0 {
            rng.gen_range(0..other_count)
        } else {
            0
        };
        let mut lines = Vec::new();
        let mut other_idx = 0;
        for metric in &metrics {
            let score = if metric == "overall" {
                if pass || (!fail_overall && other_count > 0) {
                    rng.gen_range(9..=10)
                } else {
                    rng.gen_range(3..=8)
                }
            } else {
                let this_fails = !pass && !fail_overall && other_idx == failing_other;
                other_idx += 1;
                if this_fails {
                    rng.gen_range(1..=7)
                } else {
                    rng.gen_range(8..=10)
                }
            };
            lines.push(format!("{metric}: {score}"));
        }
        format!("```\n{}\n```", lines.join("\n"))
    }

    fn judge(prompt: &str, digest: &str) -> String {
        let metrics = metric_list(prompt);
        let mut rng = rng_for(digest, "mock.judge");
        let lines: Vec<String> = metrics
            .iter()
            .map(|m| format!("{m}: {:.4}", rng.gen_range(6.0..9.5)))
            .collect();
        format!("```\n{}\n```", lines.join("\n"))
    }

    fn distractor(prompt: &str, digest: &str) -> String {
        let words = content_words(&first_segment(prompt), 6);
        let mut rng = rng_for(digest, "mock.distractor");
        let opener = pick(
            &mut rng,
            &["Most likely", "If the pattern holds", "On balance", "Given their history"],
        );
        let verb = pick(
            &mut rng,
            &[
                "they would double down on",
                "they would quietly drop",
                "they would ask around about",
                "they would write a long post on",
                "they would laugh off",
            ],
        );
        let closer = pick(
            &mut rng,
            &[
                "and move on",
                "without telling anyone",
                "before the weekend",
                "just to prove a point",
                "and regret it later",
            ],
        );
        let evidence = rng.gen_range(2..97);
        format!(
            "{opener}, {verb} {} {closer}; at least {evidence} of their earlier posts point that \
             way.",
            word(&words, rng.gen_range(0..6)),
        )
    }

    fn answer_mcq(prompt: &str, digest: &str) -> String {
        static RE: OnceLock<Regex> = OnceLock::new();
        let re = RE.get_or_init(|| Regex::new(r"(?m)^\s*([A-T])[).]\s").unwrap());
        let letters: Vec<&str> = re
            .captures_iter(prompt)
            .map(|c| c.get(1).unwrap().as_str())
            .collect();
        let mut rng = rng_for(digest, "mock.answer");
        let letter = if letters.is_empty() {
            "A"
        } else {
            letters[rng.gen_range(0..letters.len())]
        };
        format!("Answer: {letter}")
    }

    fn topic_summary(prompt: &str) -> String {
        let words = content_words(&first_segment(prompt), 2);
        if words.len() >= 2 {
            format!("Thoughts on {} and {}", words[0], words[1])
        } else {
            format!("Thoughts on {}", words[0])
        }
    }

    #[cfg(test)]
    pub fn clean_text_for_tests(text: &str) -> String {
        clean_text(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvblock;
    use crate::templates::{builtin, render_prompt};
    use std::collections::BTreeMap;

    fn bindings(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    fn backend() -> (tempfile::TempDir, MockBackend) {
        let dir = tempfile::tempdir().unwrap();
        let backend = MockBackend::new(dir.path()).unwrap();
        (dir, backend)
    }

    fn req_for(template: &str, binds: &[(&str, &str)], salt: &str) -> ChatRequest {
        let prompt = render_prompt(builtin(template).unwrap(), &bindings(binds)).unwrap();
        ChatRequest::new(
            format!("mock-model-{salt}"),
            vec![super::super::ChatMessage::user(prompt)],
        )
        .unwrap()
    }

    #[test]
    fn identical_requests_get_identical_bytes() {
        let (_dir, backend) = backend();
        let req = req_for("score", &[("text", "some ordinary text")], "a");
        let first = backend.complete_once(&req).unwrap();
        let second = backend.complete_once(&req).unwrap();
        assert_eq!(first.content, second.content);
        assert_eq!(first.finish_reason, "stop");
    }

    #[test]
    fn fixture_overrides_synthetic_response() {
        let (dir, backend) = backend();
        let req = req_for("score", &[("text", "pinned")], "a");
        std::fs::write(
            dir.path().join(format!("{}.txt", req.digest())),
            "```\nquality: low\nharmful: true\n```",
        )
        .unwrap();
        let completion = backend.complete_once(&req).unwrap();
        assert!(completion.content.contains("quality: low"));
    }

    #[test]
    fn unmarked_prompt_falls_back_to_echo() {
        let (_dir, backend) = backend();
        let req = ChatRequest::new(
            "m",
            vec![super::super::ChatMessage::user("no marker here")],
        )
        .unwrap();
        let completion = backend.complete_once(&req).unwrap();
        assert!(completion.content.starts_with("mock-echo "));
        assert!(completion.content.contains(&req.digest()));
    }

    #[test]
    fn missing_fixture_dir_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        assert!(MockBackend::new(missing).is_err());
    }

    #[test]
    fn rewrite_strips_markup_urls_handles_and_foreign_lines() {
        let dirty = "see <b>this</b> http://x.com now\n#win @bob great day out there\nこれは日本語の行です\nplain   text stays";
        let cleaned = synth::clean_text_for_tests(dirty);
        assert!(!cleaned.contains('<'));
        assert!(!cleaned.contains("http"));
        assert!(!cleaned.contains("#win"));
        assert!(!cleaned.contains("@bob"));
        assert!(!cleaned.contains("日本語"));
        assert!(cleaned.contains("plain text stays"));
    }

    #[test]
    fn rewrite_via_backend_uses_the_segment() {
        let (_dir, backend) = backend();
        let req = req_for(
            "rewrite",
            &[("text", "hello <i>world</i> visit https://spam.example now"), ("extra_rules", "")],
            "a",
        );
        let completion = backend.complete_once(&req).unwrap();
        assert!(completion.content.contains("hello"));
        assert!(!completion.content.contains("<i>"));
        assert!(!completion.content.contains("https"));
    }

    #[test]
    fn personas_respect_the_word_budget() {
        let (_dir, backend) = backend();
        for salt in 0..25 {
            let req = req_for(
                "persona",
                &[("records", &format!("notes about gardening and chess, round {salt}"))],
                &salt.to_string(),
            );
            let completion = backend.complete_once(&req).unwrap();
            let count = completion.content.split_whitespace().count();
            assert!(count < 100, "persona of {count} words (salt {salt})");
        }
    }

    #[test]
    fn profiles_land_in_the_word_window() {
        let (_dir, backend) = backend();
        for salt in 0..25 {
            let req = req_for(
                "profile",
                &[("records", &format!("long reflections on woodworking, salt {salt}"))],
                &salt.to_string(),
            );
            let completion = backend.complete_once(&req).unwrap();
            let count = completion.content.split_whitespace().count();
            assert!((100..=400).contains(&count), "profile of {count} words");
        }
    }

    #[test]
    fn scenario_response_parses_into_three_parts() {
        let (_dir, backend) = backend();
        let req = req_for("scenario", &[("text", "a long story about repairing bicycles")], "a");
        let completion = backend.complete_once(&req).unwrap();
        let kv = kvblock::parse_kv_block(&completion.content);
        assert!(!kv.get("background").unwrap().is_empty());
        assert!(kv.get("characters").unwrap().contains('-'));
        assert!(!kv.get("plots").unwrap().is_empty());
    }

    #[test]
    fn social_qa_blocks_have_distinct_kinds_and_withheld_answers() {
        let (_dir, backend) = backend();
        for salt in 0..10 {
            let req = req_for(
                "social_qa",
                &[("text", "weekend climbing trip gone sideways"), ("max_qa", "3")],
                &salt.to_string(),
            );
            let completion = backend.complete_once(&req).unwrap();
            let blocks = kvblock::split_blocks(&completion.content);
            assert!(!blocks.is_empty());
            let mut kinds = BTreeSet::new();
            for block in &blocks {
                let kv = kvblock::parse_kv_block(block);
                let scenario = kv.get("scenario").unwrap();
                let answer = kv.get("answer").unwrap();
                assert!(!scenario.contains(answer.as_str()), "answer leaked into scenario");
                assert!(kinds.insert(kv.get("kind").unwrap().clone()));
            }
        }
    }

    #[test]
    fn qc_scores_exactly_the_requested_metrics() {
        let (_dir, backend) = backend();
        let req = req_for(
            "qc",
            &[
                ("kind", "social_qa"),
                ("metrics", "hallucination, coverage, fidelity, novelty, leakage, overall"),
                ("source_text", "source material"),
                ("artifact", "the artifact"),
            ],
            "a",
        );
        let completion = backend.complete_once(&req).unwrap();
        let kv = kvblock::parse_kv_block(&completion.content);
        assert_eq!(kv.len(), 6);
        for key in ["hallucination", "coverage", "fidelity", "novelty", "leakage", "overall"] {
            let score = kvblock::leading_int(kv.get(key).unwrap()).unwrap();
            assert!((1..=10).contains(&score));
        }
    }

    #[test]
    fn distractors_differ_across_models() {
        let (_dir, backend) = backend();
        let prompt = render_prompt(
            builtin("distractor").unwrap(),
            &bindings(&[("stem", "Given this profile, what would the user pick?")]),
        )
        .unwrap();
        let mut answers = BTreeSet::new();
        for model in ["m1", "m2", "m3", "m4", "m5", "m6", "m7"] {
            let req = ChatRequest::new(
                model,
                vec![super::super::ChatMessage::user(prompt.clone())],
            )
            .unwrap();
            answers.insert(backend.complete_once(&req).unwrap().content);
        }
        assert_eq!(answers.len(), 7, "expected 7 distinct distractors");
    }

    #[test]
    fn mcq_answers_are_listed_letters() {
        let (_dir, backend) = backend();
        let options = "A) first\nB) second\nC) third\nD) fourth";
        let req = req_for(
            "answer_mcq",
            &[("stem", "Pick the best option."), ("options", options)],
            "a",
        );
        let completion = backend.complete_once(&req).unwrap();
        let letter = completion.content.trim().trim_start_matches("Answer: ");
        assert!(["A", "B", "C", "D"].contains(&letter), "got {letter:?}");
    }

    #[test]
    fn judge_scores_are_reals_for_requested_metrics() {
        let (_dir, backend) = backend();
        let req = req_for(
            "judge",
            &[
                ("application", "profile_generation"),
                ("metrics", "faithfulness, realism, coverage"),
                ("context", "ctx"),
                ("reference", "ref"),
                ("generated", "gen"),
            ],
            "a",
        );
        let completion = backend.complete_once(&req).unwrap();
        let kv = kvblock::parse_kv_block(&completion.content);
        for key in ["faithfulness", "realism", "coverage"] {
            let score = kvblock::leading_f64(kv.get(key).unwrap()).unwrap();
            assert!((1.0..=10.0).contains(&score));
        }
    }
}
