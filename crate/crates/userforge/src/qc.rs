//! Quality control: score synthesized artifacts on the metric subset that
//! applies to their kind, gate admission, and aggregate retention stats.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{ChatMessage, ChatRequest, Gateway};
use crate::kvblock::{fenced_body, leading_int, parse_kv_block};
use crate::record::SourceKind;
use crate::synthesis::{Outcome, CURATOR_SYSTEM};
use crate::templates::{builtin, render_prompt};

/// The eight review metrics. Declaration order is the canonical order used
/// in prompts and reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QCMetric {
    Hallucination,
    Coverage,
    Conciseness,
    Relevance,
    Fidelity,
    Novelty,
    Leakage,
    Overall,
}

impl QCMetric {
    pub const ALL: [QCMetric; 8] = [
        QCMetric::Hallucination,
        QCMetric::Coverage,
        QCMetric::Conciseness,
        QCMetric::Relevance,
        QCMetric::Fidelity,
        QCMetric::Novelty,
        QCMetric::Leakage,
        QCMetric::Overall,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            QCMetric::Hallucination => "hallucination",
            QCMetric::Coverage => "coverage",
            QCMetric::Conciseness => "conciseness",
            QCMetric::Relevance => "relevance",
            QCMetric::Fidelity => "fidelity",
            QCMetric::Novelty => "novelty",
            QCMetric::Leakage => "leakage",
            QCMetric::Overall => "overall",
        }
    }

    pub fn parse(s: &str) -> Option<QCMetric> {
        QCMetric::ALL.iter().copied().find(|m| m.as_str() == s.trim())
    }
}

impl fmt::Display for QCMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What kind of synthesized artifact a report is about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Persona,
    Profile,
    Stories,
    WritingStyle,
    Scenario,
    SocialQa,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 6] = [
        ArtifactKind::Persona,
        ArtifactKind::Profile,
        ArtifactKind::Stories,
        ArtifactKind::WritingStyle,
        ArtifactKind::Scenario,
        ArtifactKind::SocialQa,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ArtifactKind::Persona => "persona",
            ArtifactKind::Profile => "profile",
            ArtifactKind::Stories => "stories",
            ArtifactKind::WritingStyle => "writing_style",
            ArtifactKind::Scenario => "scenario",
            ArtifactKind::SocialQa => "social_qa",
        }
    }

    pub fn parse(s: &str) -> Option<ArtifactKind> {
        ArtifactKind::ALL.iter().copied().find(|k| k.as_str() == s.trim())
    }

    /// The four kinds making up one user dossier.
    pub fn is_dossier_part(&self) -> bool {
        matches!(
            self,
            ArtifactKind::Persona
                | ArtifactKind::Profile
                | ArtifactKind::Stories
                | ArtifactKind::WritingStyle
        )
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which metrics are scored for which artifact kind. The built-in mapping
/// can be replaced wholesale from a JSON file for experimentation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApplicabilityMatrix(pub BTreeMap<ArtifactKind, BTreeSet<QCMetric>>);

impl Default for ApplicabilityMatrix {
    fn default() -> Self {
        use ArtifactKind::*;
        use QCMetric::*;
        let mut map = BTreeMap::new();
        let persona_like: BTreeSet<QCMetric> =
            [Hallucination, Coverage, Conciseness, Relevance, Novelty, Overall].into();
        map.insert(Persona, persona_like.clone());
        map.insert(Profile, persona_like);
        let narrative: BTreeSet<QCMetric> = [Hallucination, Coverage, Novelty, Overall].into();
        map.insert(Stories, narrative.clone());
        map.insert(WritingStyle, narrative);
        map.insert(
            Scenario,
            [Hallucination, Coverage, Fidelity, Novelty, Overall].into(),
        );
        map.insert(
            SocialQa,
            [Hallucination, Coverage, Fidelity, Novelty, Leakage, Overall].into(),
        );
        ApplicabilityMatrix(map)
    }
}

impl ApplicabilityMatrix {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let matrix: ApplicabilityMatrix = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("applicability matrix: {e}")))?;
        for (kind, metrics) in &matrix.0 {
            if !metrics.contains(&QCMetric::Overall) {
                return Err(Error::config(format!(
                    "applicability matrix: {kind} is missing the overall metric"
                )));
            }
        }
        Ok(matrix)
    }

    /// Metrics for `kind`, in canonical order.
    pub fn metrics_for(&self, kind: ArtifactKind) -> Vec<QCMetric> {
        self.0.get(&kind).map(|set| set.iter().copied().collect()).unwrap_or_default()
    }
}

/// Metrics scored for one artifact kind under the built-in mapping.
pub fn applicable_metrics(kind: ArtifactKind) -> BTreeSet<QCMetric> {
    ApplicabilityMatrix::default().0.remove(&kind).unwrap_or_default()
}

/// Scores for one artifact over exactly its applicable metric set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QCReport {
    pub artifact_id: String,
    pub artifact_kind: ArtifactKind,
    pub scores: BTreeMap<QCMetric, u8>,
}

/// Keep iff the overall score exceeds 8 and every other applicable score
/// exceeds 7 — both strictly.
pub fn qc_gate(report: &QCReport) -> bool {
    let Some(&overall) = report.scores.get(&QCMetric::Overall) else {
        return false;
    };
    overall > 8
        && report
            .scores
            .iter()
            .filter(|(m, _)| **m != QCMetric::Overall)
            .all(|(_, &s)| s > 7)
}

/// Judge settings for review calls.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct QcConfig {
    pub model_name: String,
    pub temperature: f64,
}

impl Default for QcConfig {
    fn default() -> Self {
        QcConfig {
            model_name: "mock-judge".to_string(),
            temperature: 0.0,
        }
    }
}

/// One artifact handed to the reviewer: its id, kind, and rendered text.
#[derive(Clone, Debug)]
pub struct QcArtifact {
    pub artifact_id: String,
    pub kind: ArtifactKind,
    pub text: String,
}

/// Builds the review request for one artifact.
pub fn qc_request(
    config: &QcConfig,
    matrix: &ApplicabilityMatrix,
    artifact: &QcArtifact,
    source_text: &str,
) -> Result<ChatRequest> {
    let metrics = matrix
        .metrics_for(artifact.kind)
        .iter()
        .map(|m| m.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    let prompt = render_prompt(
        builtin("qc")?,
        &BTreeMap::from([
            ("kind".to_string(), artifact.kind.to_string()),
            ("metrics".to_string(), metrics),
            ("source_text".to_string(), source_text.to_string()),
            ("artifact".to_string(), artifact.text.clone()),
        ]),
    )?;
    Ok(ChatRequest::new(
        &config.model_name,
        vec![ChatMessage::system(CURATOR_SYSTEM), ChatMessage::user(&prompt)],
    )?
    .with_temperature(config.temperature))
}

fn parse_report(
    reply: &str,
    artifact: &QcArtifact,
    expected: &[QCMetric],
) -> Option<QCReport> {
    let kv = parse_kv_block(&fenced_body(reply));
    let mut scores = BTreeMap::new();
    for &metric in expected {
        let raw = kv.get(metric.as_str())?;
        let value = leading_int(raw)?;
        if !(1..=10).contains(&value) {
            return None;
        }
        scores.insert(metric, value as u8);
    }
    Some(QCReport {
        artifact_id: artifact.artifact_id.clone(),
        artifact_kind: artifact.kind,
        scores,
    })
}

/// Scores one artifact against its source text. A reply with a missing or
/// out-of-range metric gets one re-ask, then the artifact is rejected.
pub fn qc_score(
    gateway: &Gateway,
    config: &QcConfig,
    matrix: &ApplicabilityMatrix,
    artifact: &QcArtifact,
    source_text: &str,
) -> Result<Outcome<QCReport>> {
    let expected = matrix.metrics_for(artifact.kind);
    if expected.is_empty() {
        return Err(Error::config(format!(
            "no applicable metrics configured for kind {}",
            artifact.kind
        )));
    }
    let req = qc_request(config, matrix, artifact, source_text)?;
    let first = gateway.complete(&req)?.content;
    if let Some(report) = parse_report(&first, artifact, &expected) {
        return Ok(Outcome::Accepted(report));
    }
    let retry = {
        let mut messages = req.messages.clone();
        messages.push(ChatMessage::assistant(&first));
        messages.push(ChatMessage::user(
            "Some scores were missing or out of range. Reply again with one integer from 1 to 10 \
             for every listed metric, in the fenced block.",
        ));
        ChatRequest::new(&req.model_name, messages)?.with_temperature(req.temperature)
    };
    let second = gateway.complete(&retry)?.content;
    match parse_report(&second, artifact, &expected) {
        Some(report) => Ok(Outcome::Accepted(report)),
        None => Ok(Outcome::rejected("unparseable_qc")),
    }
}

/// One gate decision, tagged for aggregation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QcVerdict {
    pub artifact_id: String,
    pub artifact_kind: ArtifactKind,
    pub source: SourceKind,
    pub keep: bool,
}

/// Kept/total counts per (source, kind).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct QcStats {
    pub rows: BTreeMap<SourceKind, BTreeMap<ArtifactKind, (usize, usize)>>,
}

impl QcStats {
    pub fn kept_total(&self, source: SourceKind, kind: ArtifactKind) -> (usize, usize) {
        self.rows
            .get(&source)
            .and_then(|kinds| kinds.get(&kind))
            .copied()
            .unwrap_or((0, 0))
    }

    /// Fraction rejected for one (source, kind); `None` when nothing was
    /// reviewed there.
    pub fn rejection_rate(&self, source: SourceKind, kind: ArtifactKind) -> Option<f64> {
        let (kept, total) = self.kept_total(source, kind);
        (total > 0).then(|| (total - kept) as f64 / total as f64)
    }

    /// Rejection rate for one kind across all sources.
    pub fn rejection_rate_by_kind(&self, kind: ArtifactKind) -> Option<f64> {
        let (kept, total) = self
            .rows
            .values()
            .filter_map(|kinds| kinds.get(&kind))
            .fold((0usize, 0usize), |(k, t), &(k2, t2)| (k + k2, t + t2));
        (total > 0).then(|| (total - kept) as f64 / total as f64)
    }

    /// Plain-text table: one row per (source, kind) with kept/total and the
    /// rejection rate.
    pub fn render(&self) -> String {
        let mut out = String::from("source   kind             kept  total  rejection\n");
        for (source, kinds) in &self.rows {
            for (kind, (kept, total)) in kinds {
                let rate = if *total > 0 {
                    (total - kept) as f64 / *total as f64
                } else {
                    0.0
                };
                out.push_str(&format!(
                    "{:<8} {:<16} {:>4}  {:>5}  {:>9.3}\n",
                    source.to_string(),
                    kind.to_string(),
                    kept,
                    total,
                    rate
                ));
            }
        }
        out
    }
}

/// Aggregates verdicts into kept/total counts per (source, kind).
pub fn qc_stats(verdicts: &[QcVerdict]) -> QcStats {
    let mut stats = QcStats::default();
    for v in verdicts {
        let cell = stats
            .rows
            .entry(v.source)
            .or_default()
            .entry(v.artifact_kind)
            .or_insert((0, 0));
        cell.1 += 1;
        if v.keep {
            cell.0 += 1;
        }
    }
    stats
}
