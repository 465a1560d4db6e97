//! Stage orchestration over a working directory.
//!
//! A run is described by one [`PipelineConfig`] and executes up to eight
//! stages in a fixed dependency order: ingest → filter → rewrite → score →
//! synthesize → qc → build-tasks → build-eval. Every stage reads files
//! written by its upstream stages and writes its own outputs under
//! `work_dir/<stage>/`. A [`PipelineManifest`] in `work_dir/manifest.json`
//! records, per stage, the digest of the inputs it consumed and the digest
//! of the outputs it produced; a stage is skipped on resume only when both
//! digests still match what is on disk, so deleting or corrupting any
//! intermediate file causes exactly the affected stages to re-run.
//!
//! Digests hash file *names* plus contents — never absolute paths — so the
//! same corpus processed in two different working directories produces the
//! same final digest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, EvalItem};
use crate::filter::{rejection_histogram, FilterEngine, FilterVerdict};
use crate::gateway::{BackendKind, ChatRequest, Gateway, GatewayConfig};
use crate::jsonl::{read_jsonl, write_jsonl};
use crate::kcore::{kcore_filter, InteractionGraph};
use crate::qc::{
    qc_score, qc_stats, ApplicabilityMatrix, ArtifactKind, QCReport, QcArtifact, QcConfig,
    QcVerdict,
};
use crate::record::{
    group_by_user, parse_records_file, CleanRecord, RawRecord, SourceKind, UserLog,
};
use crate::seeding::{derive_seed, sha256_hex};
use crate::synthesis::{self, Outcome, Scenario, SocialQA, SynthesisConfig, UserDossier};
use crate::tasks::{
    build_item_selection, build_personalized_commenting, build_profile_generation,
    build_scenario_generation, build_social_qa, build_writing_imitation, mix_general,
    sample_balanced, split_train_test, write_training_config, CatalogItem, TaskKind,
    TrainingSample, TurnRole, ITEM_SELECTION_CANDIDATES,
};
use crate::templates::{builtin, render_prompt};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Paths of the raw per-source dumps. A source without a path is simply
/// absent from the run; `reddit_comments` additionally feeds the
/// personalized-commenting task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputsConfig {
    pub reddit: Option<PathBuf>,
    pub twitter: Option<PathBuf>,
    pub blogger: Option<PathBuf>,
    pub amazon: Option<PathBuf>,
    pub reddit_comments: Option<PathBuf>,
}

impl InputsConfig {
    /// Configured `(source, dump path)` pairs in canonical source order.
    pub fn sources(&self) -> Vec<(SourceKind, &Path)> {
        let mut out = Vec::new();
        for source in SourceKind::ALL {
            let path = match source {
                SourceKind::Reddit => &self.reddit,
                SourceKind::Twitter => &self.twitter,
                SourceKind::Blogger => &self.blogger,
                SourceKind::Amazon => &self.amazon,
            };
            if let Some(p) = path {
                out.push((source, p.as_path()));
            }
        }
        out
    }
}

/// Rule-filter and interaction-graph settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterStageConfig {
    /// Minimum reviews per item kept by the review-graph core.
    pub item_min: usize,
    /// Minimum reviews per user kept by the review-graph core.
    pub user_min: usize,
    /// First-person pronoun list for the blog rule; empty means the
    /// built-in English list.
    pub pronouns: Vec<String>,
}

impl Default for FilterStageConfig {
    fn default() -> Self {
        FilterStageConfig {
            item_min: 3,
            user_min: 8,
            pronouns: Vec::new(),
        }
    }
}

/// Review-stage settings plus an optional metric-applicability override.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QcStageConfig {
    pub model_name: String,
    pub temperature: f64,
    /// JSON file overriding which metrics apply to which artifact kinds.
    pub applicability_override: Option<PathBuf>,
}

impl Default for QcStageConfig {
    fn default() -> Self {
        let base = QcConfig::default();
        QcStageConfig {
            model_name: base.model_name,
            temperature: base.temperature,
            applicability_override: None,
        }
    }
}

impl QcStageConfig {
    pub fn qc_config(&self) -> QcConfig {
        QcConfig {
            model_name: self.model_name.clone(),
            temperature: self.temperature,
        }
    }
}

/// Two general-purpose ShareGPT corpora blended into the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    pub general_a: PathBuf,
    pub general_b: PathBuf,
    #[serde(default = "default_ratio_general")]
    pub ratio_general_a: f64,
    #[serde(default = "default_ratio_general")]
    pub ratio_general_b: f64,
    #[serde(default = "default_ratio_tasks")]
    pub ratio_tasks: f64,
}

fn default_ratio_general() -> f64 {
    0.25
}

fn default_ratio_tasks() -> f64 {
    0.5
}

/// Corpus-assembly settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasksStageConfig {
    /// Per-(task, source) cap applied before the split; unset keeps all.
    pub quota: Option<usize>,
    /// Fraction of users routed to the held-out split.
    pub test_fraction: f64,
    /// Optional blend with general-purpose corpora, train split only.
    pub mix: Option<MixConfig>,
}

impl Default for TasksStageConfig {
    fn default() -> Self {
        TasksStageConfig {
            quota: None,
            test_fraction: 0.10,
            mix: None,
        }
    }
}

/// Benchmark-item settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalStageConfig {
    /// Upper bound on emitted items per task.
    pub per_task_items: usize,
    /// Models asked for one distractor each on the 8-way tasks.
    pub distractor_models: Vec<String>,
}

impl Default for EvalStageConfig {
    fn default() -> Self {
        EvalStageConfig {
            per_task_items: 6,
            distractor_models: eval::DISTRACTOR_MODELS
                .iter()
                .map(|m| m.to_string())
                .collect(),
        }
    }
}

/// Everything one run needs: inputs, the working directory, and per-stage
/// sections. Deserializes from a TOML file; every field has a default so a
/// minimal config only names its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub work_dir: PathBuf,
    pub inputs: InputsConfig,
    pub gateway: GatewayConfig,
    pub filter: FilterStageConfig,
    pub synthesis: SynthesisConfig,
    pub qc: QcStageConfig,
    pub tasks: TasksStageConfig,
    pub eval: EvalStageConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 17,
            work_dir: PathBuf::from("work"),
            inputs: InputsConfig::default(),
            gateway: GatewayConfig::default(),
            filter: FilterStageConfig::default(),
            synthesis: SynthesisConfig::default(),
            qc: QcStageConfig::default(),
            tasks: TasksStageConfig::default(),
            eval: EvalStageConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Digest of the full configuration; a change here invalidates any
    /// existing manifest.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        sha256_hex(canonical.as_bytes())
    }

    /// Stable identifier derived from the config digest.
    pub fn run_id(&self) -> String {
        format!("run-{}", &self.digest()[..16])
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// The eight pipeline stages in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Filter,
    Rewrite,
    Score,
    Synthesize,
    Qc,
    BuildTasks,
    BuildEval,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Filter,
        Stage::Rewrite,
        Stage::Score,
        Stage::Synthesize,
        Stage::Qc,
        Stage::BuildTasks,
        Stage::BuildEval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Filter => "filter",
            Stage::Rewrite => "rewrite",
            Stage::Score => "score",
            Stage::Synthesize => "synthesize",
            Stage::Qc => "qc",
            Stage::BuildTasks => "build-tasks",
            Stage::BuildEval => "build-eval",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s)
    }

    /// Direct upstream dependencies; transitive closure follows from the
    /// chain shape.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Filter => &[Stage::Ingest],
            Stage::Rewrite => &[Stage::Filter],
            Stage::Score => &[Stage::Rewrite],
            Stage::Synthesize => &[Stage::Score],
            Stage::Qc => &[Stage::Synthesize],
            Stage::BuildTasks => &[Stage::Qc],
            Stage::BuildEval => &[Stage::BuildTasks],
        }
    }

    /// Whether the stage issues model calls.
    fn needs_gateway(self) -> bool {
        !matches!(self, Stage::Ingest | Stage::Filter)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageState {
    #[default]
    Pending,
    Running,
    Done,
    Failed,
}

/// Per-stage completion record: state plus the digests of what the stage
/// read and wrote.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub state: StageState,
    #[serde(default)]
    pub input_digest: String,
    #[serde(default)]
    pub output_digest: String,
}

/// The single source of truth for a run's progress, persisted as JSON in
/// the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub run_id: String,
    pub seed: u64,
    pub config_digest: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl PipelineManifest {
    pub fn new(config: &PipelineConfig) -> Self {
        let stages = Stage::ALL
            .into_iter()
            .map(|s| (s.as_str().to_string(), StageRecord::default()))
            .collect();
        PipelineManifest {
            run_id: config.run_id(),
            seed: config.seed,
            config_digest: config.digest(),
            stages,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("manifest {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("serialize manifest: {e}")))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn stage(&self, stage: Stage) -> &StageRecord {
        self.stages
            .get(stage.as_str())
            .expect("manifest holds every stage")
    }

    fn stage_mut(&mut self, stage: Stage) -> &mut StageRecord {
        self.stages
            .entry(stage.as_str().to_string())
            .or_default()
    }

    pub fn all_done(&self) -> bool {
        Stage::ALL
            .into_iter()
            .all(|s| self.stage(s).state == StageState::Done)
    }

    /// Digest over the completed stages' output digests, in stage order.
    /// Identical configs and inputs yield identical values regardless of
    /// where the working directory lives.
    pub fn final_digest(&self) -> String {
        let mut acc = String::new();
        for stage in Stage::ALL {
            let rec = self.stage(stage);
            if rec.state == StageState::Done {
                acc.push_str(stage.as_str());
                acc.push(':');
                acc.push_str(&rec.output_digest);
                acc.push('\n');
            }
        }
        sha256_hex(acc.as_bytes())
    }
}

// ---------------------------------------------------------------------------
// Working-directory layout
// ---------------------------------------------------------------------------

/// Computes every file path inside the working directory.
#[derive(Clone, Debug)]
pub struct WorkPaths {
    pub work: PathBuf,
}

impl WorkPaths {
    pub fn new(work: impl Into<PathBuf>) -> Self {
        WorkPaths { work: work.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.work.join("manifest.json")
    }

    fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.work.join(stage.as_str())
    }

    pub fn ingest_records(&self, source: SourceKind) -> PathBuf {
        self.stage_dir(Stage::Ingest)
            .join(format!("{source}.records.jsonl"))
    }

    pub fn ingest_rejects(&self, source: SourceKind) -> PathBuf {
        self.stage_dir(Stage::Ingest)
            .join(format!("{source}.rejects.jsonl"))
    }

    pub fn ingest_comments(&self) -> PathBuf {
        self.stage_dir(Stage::Ingest).join("comments.records.jsonl")
    }

    pub fn ingest_comment_rejects(&self) -> PathBuf {
        self.stage_dir(Stage::Ingest).join("comments.rejects.jsonl")
    }

    pub fn filter_kept(&self, source: SourceKind) -> PathBuf {
        self.stage_dir(Stage::Filter)
            .join(format!("{source}.kept.jsonl"))
    }

    pub fn filter_histogram(&self, source: SourceKind) -> PathBuf {
        self.stage_dir(Stage::Filter)
            .join(format!("{source}.histogram.json"))
    }

    pub fn rewrite_clean(&self, source: SourceKind) -> PathBuf {
        self.stage_dir(Stage::Rewrite)
            .join(format!("{source}.clean.jsonl"))
    }

    pub fn rewrite_rejects(&self, source: SourceKind) -> PathBuf {
        self.stage_dir(Stage::Rewrite)
            .join(format!("{source}.rejects.jsonl"))
    }

    pub fn score_admitted(&self, source: SourceKind) -> PathBuf {
        self.stage_dir(Stage::Score)
            .join(format!("{source}.admitted.jsonl"))
    }

    pub fn score_rejects(&self, source: SourceKind) -> PathBuf {
        self.stage_dir(Stage::Score)
            .join(format!("{source}.rejects.jsonl"))
    }

    pub fn synth_dossiers(&self) -> PathBuf {
        self.stage_dir(Stage::Synthesize).join("dossiers.jsonl")
    }

    pub fn synth_rejects(&self) -> PathBuf {
        self.stage_dir(Stage::Synthesize).join("rejects.jsonl")
    }

    pub fn synth_scenarios(&self) -> PathBuf {
        self.stage_dir(Stage::Synthesize).join("scenarios.jsonl")
    }

    pub fn synth_social_qa(&self) -> PathBuf {
        self.stage_dir(Stage::Synthesize).join("social_qa.jsonl")
    }

    pub fn qc_reports(&self) -> PathBuf {
        self.stage_dir(Stage::Qc).join("reports.jsonl")
    }

    pub fn qc_verdicts(&self) -> PathBuf {
        self.stage_dir(Stage::Qc).join("verdicts.jsonl")
    }

    pub fn qc_unparseable(&self) -> PathBuf {
        self.stage_dir(Stage::Qc).join("unparseable.jsonl")
    }

    pub fn qc_dossiers(&self) -> PathBuf {
        self.stage_dir(Stage::Qc).join("dossiers.jsonl")
    }

    pub fn qc_scenarios(&self) -> PathBuf {
        self.stage_dir(Stage::Qc).join("scenarios.jsonl")
    }

    pub fn qc_social_qa(&self) -> PathBuf {
        self.stage_dir(Stage::Qc).join("social_qa.jsonl")
    }

    pub fn qc_stats_file(&self) -> PathBuf {
        self.stage_dir(Stage::Qc).join("stats.txt")
    }

    pub fn tasks_train(&self) -> PathBuf {
        self.stage_dir(Stage::BuildTasks).join("train.jsonl")
    }

    pub fn tasks_test(&self) -> PathBuf {
        self.stage_dir(Stage::BuildTasks).join("test.jsonl")
    }

    pub fn tasks_training_config(&self) -> PathBuf {
        self.stage_dir(Stage::BuildTasks).join("training-config.md")
    }

    pub fn eval_items(&self) -> PathBuf {
        self.stage_dir(Stage::BuildEval).join("items.jsonl")
    }

    pub fn eval_audit(&self) -> PathBuf {
        self.stage_dir(Stage::BuildEval).join("audit.jsonl")
    }

    /// Default canned-response directory for the mock backend.
    pub fn fixtures_dir(&self) -> PathBuf {
        self.work.join("fixtures")
    }
}

// ---------------------------------------------------------------------------
// Row envelopes
// ---------------------------------------------------------------------------

/// A synthesized dossier plus the source platform its records came from.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DossierRow {
    pub source: SourceKind,
    pub dossier: UserDossier,
}

/// A synthesized scenario plus its owning user and platform.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub source: SourceKind,
    pub user_id: String,
    pub scenario: Scenario,
}

/// A synthesized QA triplet plus its owning user and platform.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QaRow {
    pub source: SourceKind,
    pub user_id: String,
    pub qa: SocialQA,
}

/// A dropped unit and why, for audit files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RejectRow {
    pub id: String,
    pub reason: String,
}

// ---------------------------------------------------------------------------
// Digests
// ---------------------------------------------------------------------------

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(sha256_hex(&bytes))
}

/// Combined digest over `name:content-hash` lines. File names, not full
/// paths, so the value travels with the corpus rather than the machine.
fn files_digest(files: &[PathBuf]) -> Result<String> {
    let mut acc = String::new();
    for path in files {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        acc.push_str(&name);
        acc.push(':');
        acc.push_str(&file_digest(path)?);
        acc.push('\n');
    }
    Ok(sha256_hex(acc.as_bytes()))
}

/// Input files a stage reads. All must exist before the stage may run.
fn stage_inputs(stage: Stage, config: &PipelineConfig, paths: &WorkPaths) -> Vec<PathBuf> {
    let sources: Vec<SourceKind> = config.inputs.sources().iter().map(|(s, _)| *s).collect();
    let mut files = Vec::new();
    match stage {
        Stage::Ingest => {
            for (_, path) in config.inputs.sources() {
                files.push(path.to_path_buf());
            }
            if let Some(p) = &config.inputs.reddit_comments {
                files.push(p.clone());
            }
        }
        Stage::Filter => {
            for s in &sources {
                files.push(paths.ingest_records(*s));
            }
        }
        Stage::Rewrite => {
            for s in &sources {
                files.push(paths.filter_kept(*s));
            }
        }
        Stage::Score => {
            for s in &sources {
                files.push(paths.rewrite_clean(*s));
            }
        }
        Stage::Synthesize => {
            for s in &sources {
                files.push(paths.score_admitted(*s));
            }
        }
        Stage::Qc => {
            files.push(paths.synth_dossiers());
            files.push(paths.synth_scenarios());
            files.push(paths.synth_social_qa());
            for s in &sources {
                files.push(paths.score_admitted(*s));
            }
            if let Some(p) = &config.qc.applicability_override {
                files.push(p.clone());
            }
        }
        Stage::BuildTasks => {
            files.push(paths.qc_dossiers());
            files.push(paths.qc_scenarios());
            files.push(paths.qc_social_qa());
            for s in &sources {
                files.push(paths.score_admitted(*s));
            }
            if config.inputs.reddit_comments.is_some() {
                files.push(paths.ingest_comments());
            }
            if let Some(mix) = &config.tasks.mix {
                files.push(mix.general_a.clone());
                files.push(mix.general_b.clone());
            }
        }
        Stage::BuildEval => {
            files.push(paths.tasks_train());
            files.push(paths.tasks_test());
            files.push(paths.qc_dossiers());
            for s in &sources {
                files.push(paths.score_admitted(*s));
            }
        }
    }
    files
}

/// Output files a stage promises to write.
fn stage_outputs(stage: Stage, config: &PipelineConfig, paths: &WorkPaths) -> Vec<PathBuf> {
    let sources: Vec<SourceKind> = config.inputs.sources().iter().map(|(s, _)| *s).collect();
    let mut files = Vec::new();
    match stage {
        Stage::Ingest => {
            for s in &sources {
                files.push(paths.ingest_records(*s));
                files.push(paths.ingest_rejects(*s));
            }
            if config.inputs.reddit_comments.is_some() {
                files.push(paths.ingest_comments());
                files.push(paths.ingest_comment_rejects());
            }
        }
        Stage::Filter => {
            for s in &sources {
                files.push(paths.filter_kept(*s));
                files.push(paths.filter_histogram(*s));
            }
        }
        Stage::Rewrite => {
            for s in &sources {
                files.push(paths.rewrite_clean(*s));
                files.push(paths.rewrite_rejects(*s));
            }
        }
        Stage::Score => {
            for s in &sources {
                files.push(paths.score_admitted(*s));
                files.push(paths.score_rejects(*s));
            }
        }
        Stage::Synthesize => {
            files.push(paths.synth_dossiers());
            files.push(paths.synth_rejects());
            files.push(paths.synth_scenarios());
            files.push(paths.synth_social_qa());
        }
        Stage::Qc => {
            files.push(paths.qc_reports());
            files.push(paths.qc_verdicts());
            files.push(paths.qc_unparseable());
            files.push(paths.qc_dossiers());
            files.push(paths.qc_scenarios());
            files.push(paths.qc_social_qa());
            files.push(paths.qc_stats_file());
        }
        Stage::BuildTasks => {
            files.push(paths.tasks_train());
            files.push(paths.tasks_test());
            files.push(paths.tasks_training_config());
        }
        Stage::BuildEval => {
            files.push(paths.eval_items());
            files.push(paths.eval_audit());
        }
    }
    files
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

fn stage_err(stage: Stage, detail: impl Into<String>) -> Error {
    Error::Stage {
        stage: stage.as_str().to_string(),
        detail: detail.into(),
    }
}

/// Runs the requested stages in dependency order, resuming from the
/// manifest when possible.
///
/// A stage is skipped when it is already `done`, its recorded input digest
/// matches the inputs on disk, and its recorded output digest matches the
/// outputs on disk. Any mismatch — edited inputs, deleted or corrupted
/// outputs — re-runs the stage. A failing stage is marked `failed` and
/// halts everything downstream; whatever it already wrote stays on disk
/// for inspection.
pub fn run_pipeline(config: &PipelineConfig, stages: &[Stage]) -> Result<PipelineManifest> {
    let mut effective = config.clone();
    let paths = WorkPaths::new(&config.work_dir);
    std::fs::create_dir_all(&paths.work)
        .map_err(|e| Error::io(paths.work.display().to_string(), e))?;
    if effective.gateway.backend == BackendKind::Mock && effective.gateway.fixtures_dir.is_none() {
        let dir = paths.fixtures_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        effective.gateway.fixtures_dir = Some(dir);
    }

    let manifest_path = paths.manifest();
    let mut manifest = if manifest_path.exists() {
        let loaded = PipelineManifest::load(&manifest_path)?;
        if loaded.config_digest == config.digest() {
            loaded
        } else {
            log::info!("configuration changed; starting a fresh manifest");
            PipelineManifest::new(config)
        }
    } else {
        PipelineManifest::new(config)
    };

    let requested: Vec<Stage> = Stage::ALL
        .into_iter()
        .filter(|s| stages.contains(s))
        .collect();
    if requested.is_empty() {
        return Err(Error::config("no stages requested"));
    }

    let gateway = if requested.iter().any(|s| s.needs_gateway()) {
        Some(Gateway::new(&effective.gateway)?)
    } else {
        None
    };

    for stage in requested {
        for dep in stage.upstream() {
            if manifest.stage(*dep).state != StageState::Done {
                return Err(stage_err(
                    stage,
                    format!("upstream stage {dep} has not completed"),
                ));
            }
        }

        let inputs = stage_inputs(stage, &effective, &paths);
        for input in &inputs {
            if !input.exists() {
                return Err(stage_err(
                    stage,
                    format!("missing input file {}", input.display()),
                ));
            }
        }
        let input_digest = files_digest(&inputs)?;
        let outputs = stage_outputs(stage, &effective, &paths);

        let rec = manifest.stage(stage);
        if rec.state == StageState::Done && rec.input_digest == input_digest {
            let outputs_intact = outputs.iter().all(|p| p.exists())
                && files_digest(&outputs).map(|d| d == rec.output_digest).unwrap_or(false);
            if outputs_intact {
                log::info!("stage {stage}: up to date, skipping");
                continue;
            }
            log::info!("stage {stage}: outputs changed on disk, re-running");
        }

        log::info!("stage {stage}: running");
        {
            let rec = manifest.stage_mut(stage);
            rec.state = StageState::Running;
            rec.input_digest = input_digest.clone();
            rec.output_digest = String::new();
        }
        manifest.save(&manifest_path)?;

        let result = execute_stage(stage, &effective, &paths, gateway.as_ref());
        match result {
            Ok(()) => {
                let output_digest = files_digest(&outputs)?;
                let rec = manifest.stage_mut(stage);
                rec.state = StageState::Done;
                rec.output_digest = output_digest;
                manifest.save(&manifest_path)?;
            }
            Err(e) => {
                manifest.stage_mut(stage).state = StageState::Failed;
                manifest.save(&manifest_path)?;
                return Err(e);
            }
        }
    }

    Ok(manifest)
}

fn execute_stage(
    stage: Stage,
    config: &PipelineConfig,
    paths: &WorkPaths,
    gateway: Option<&Gateway>,
) -> Result<()> {
    let gw = || gateway.expect("gateway built for stages that call it");
    match stage {
        Stage::Ingest => run_ingest(config, paths),
        Stage::Filter => run_filter(config, paths),
        Stage::Rewrite => run_rewrite(config, paths, gw()),
        Stage::Score => run_score(config, paths, gw()),
        Stage::Synthesize => run_synthesize(config, paths, gw()),
        Stage::Qc => run_qc(config, paths, gw()),
        Stage::BuildTasks => run_build_tasks(config, paths, gw()),
        Stage::BuildEval => run_build_eval(config, paths, gw()),
    }
}

// ---------------------------------------------------------------------------
// Stage executors
// ---------------------------------------------------------------------------

fn run_ingest(config: &PipelineConfig, paths: &WorkPaths) -> Result<()> {
    for (source, dump) in config.inputs.sources() {
        let outcome = parse_records_file(dump, source)?;
        write_jsonl(&paths.ingest_records(source), &outcome.records)?;
        write_jsonl(&paths.ingest_rejects(source), &outcome.rejects)?;
    }
    if let Some(dump) = &config.inputs.reddit_comments {
        let outcome = parse_records_file(dump, SourceKind::Reddit)?;
        write_jsonl(&paths.ingest_comments(), &outcome.records)?;
        write_jsonl(&paths.ingest_comment_rejects(), &outcome.rejects)?;
    }
    Ok(())
}

fn run_filter(config: &PipelineConfig, paths: &WorkPaths) -> Result<()> {
    let engine = if config.filter.pronouns.is_empty() {
        FilterEngine::default()
    } else {
        FilterEngine::new(&config.filter.pronouns)?
    };
    for (source, _) in config.inputs.sources() {
        let records: Vec<RawRecord> = read_jsonl(&paths.ingest_records(source))?;
        let verdicts: Vec<FilterVerdict> = records
            .iter()
            .map(|r| engine.filter_record(r))
            .collect::<Result<_>>()?;
        let mut kept: Vec<RawRecord> = records
            .into_iter()
            .zip(&verdicts)
            .filter(|(_, v)| v.keep)
            .map(|(r, _)| r)
            .collect();
        let mut histogram = rejection_histogram(&verdicts);

        if source == SourceKind::Amazon {
            let edges: Vec<(String, String)> = kept
                .iter()
                .filter_map(|r| {
                    r.meta
                        .as_amazon()
                        .map(|m| (r.author_id.clone(), m.item_id.clone()))
                })
                .collect();
            let graph = InteractionGraph::from_edges(edges);
            let core = kcore_filter(&graph, config.filter.item_min, config.filter.user_min)?;
            let before = kept.len();
            kept.retain(|r| {
                r.meta
                    .as_amazon()
                    .is_some_and(|m| core.contains(&r.author_id, &m.item_id))
            });
            let dropped = before - kept.len();
            if dropped > 0 {
                histogram.insert("kcore".to_string(), dropped);
            }
        }

        write_jsonl(&paths.filter_kept(source), &kept)?;
        let hist_path = paths.filter_histogram(source);
        let mut text = serde_json::to_string_pretty(&histogram)
            .map_err(|e| Error::data(format!("serialize histogram: {e}")))?;
        text.push('\n');
        std::fs::write(&hist_path, text)
            .map_err(|e| Error::io(hist_path.display().to_string(), e))?;
    }
    Ok(())
}

fn run_rewrite(config: &PipelineConfig, paths: &WorkPaths, gateway: &Gateway) -> Result<()> {
    for (source, _) in config.inputs.sources() {
        let records: Vec<RawRecord> = read_jsonl(&paths.filter_kept(source))?;
        let outcomes: Vec<(String, Outcome<CleanRecord>)> = records
            .par_iter()
            .map(|r| {
                synthesis::rewrite_text(gateway, &config.synthesis, r)
                    .map(|o| (r.record_id.clone(), o))
            })
            .collect::<Result<_>>()?;
        let mut clean = Vec::new();
        let mut rejects = Vec::new();
        for (record_id, outcome) in outcomes {
            match outcome {
                Outcome::Accepted(c) => clean.push(c),
                Outcome::Rejected { reason } => rejects.push(RejectRow { id: record_id, reason }),
            }
        }
        write_jsonl(&paths.rewrite_clean(source), &clean)?;
        write_jsonl(&paths.rewrite_rejects(source), &rejects)?;
    }
    Ok(())
}

fn run_score(config: &PipelineConfig, paths: &WorkPaths, gateway: &Gateway) -> Result<()> {
    for (source, _) in config.inputs.sources() {
        let records: Vec<CleanRecord> = read_jsonl(&paths.rewrite_clean(source))?;
        let outcomes: Vec<(String, Outcome<CleanRecord>)> = records
            .par_iter()
            .map(|c| {
                synthesis::score_text(gateway, &config.synthesis, c)
                    .map(|o| (c.record_id.clone(), o))
            })
            .collect::<Result<_>>()?;
        let mut admitted = Vec::new();
        let mut rejects = Vec::new();
        for (record_id, outcome) in outcomes {
            match outcome {
                Outcome::Accepted(c) if c.is_admissible() => admitted.push(c),
                Outcome::Accepted(c) => {
                    let reason = if c.harmful == Some(true) {
                        "harmful".to_string()
                    } else {
                        match c.quality {
                            Some(q) => format!("quality_{}", serde_plain_quality(q)),
                            None => "unscored".to_string(),
                        }
                    };
                    rejects.push(RejectRow { id: record_id, reason });
                }
                Outcome::Rejected { reason } => rejects.push(RejectRow { id: record_id, reason }),
            }
        }
        write_jsonl(&paths.score_admitted(source), &admitted)?;
        write_jsonl(&paths.score_rejects(source), &rejects)?;
    }
    Ok(())
}

fn serde_plain_quality(q: crate::record::Quality) -> &'static str {
    match q {
        crate::record::Quality::High => "high",
        crate::record::Quality::Medium => "medium",
        crate::record::Quality::Low => "low",
    }
}

fn load_admitted(config: &PipelineConfig, paths: &WorkPaths) -> Result<Vec<CleanRecord>> {
    let mut all = Vec::new();
    for (source, _) in config.inputs.sources() {
        all.extend(read_jsonl::<CleanRecord>(&paths.score_admitted(source))?);
    }
    Ok(all)
}

fn run_synthesize(config: &PipelineConfig, paths: &WorkPaths, gateway: &Gateway) -> Result<()> {
    let admitted = load_admitted(config, paths)?;
    let logs = group_by_user(admitted.clone());

    // Dossiers: one per user who still has admitted records.
    let dossier_results: Vec<(SourceKind, String, Outcome<UserDossier>)> = logs
        .par_iter()
        .map(|log| {
            synthesis::synth_user(gateway, &config.synthesis, log)
                .map(|o| (log.source, log.user_id.clone(), o))
        })
        .collect::<Result<_>>()?;
    let mut dossiers = Vec::new();
    let mut rejects = Vec::new();
    for (source, user_id, outcome) in dossier_results {
        match outcome {
            Outcome::Accepted(d) => dossiers.push(DossierRow { source, dossier: d }),
            Outcome::Rejected { reason } => rejects.push(RejectRow { id: user_id, reason }),
        }
    }

    // Scenarios: a per-source number of variants from each admitted record.
    let mut scenario_jobs: Vec<(&CleanRecord, usize)> = Vec::new();
    for record in &admitted {
        for variant in 0..config.synthesis.scenarios_per_record(record.source) {
            scenario_jobs.push((record, variant));
        }
    }
    let scenario_results: Vec<(SourceKind, String, String, Outcome<Scenario>)> = scenario_jobs
        .par_iter()
        .map(|(record, variant)| {
            synthesis::synth_scenario(gateway, &config.synthesis, record, *variant).map(|o| {
                (
                    record.source,
                    record.author_id.clone(),
                    format!("{}-sc{}", record.record_id, variant),
                    o,
                )
            })
        })
        .collect::<Result<_>>()?;
    let mut scenarios = Vec::new();
    for (source, user_id, scenario_id, outcome) in scenario_results {
        match outcome {
            Outcome::Accepted(s) => scenarios.push(ScenarioRow {
                source,
                user_id,
                scenario: s,
            }),
            Outcome::Rejected { reason } => rejects.push(RejectRow { id: scenario_id, reason }),
        }
    }

    // Social QA: post platforms only; review records carry no social scene.
    let qa_results: Vec<(SourceKind, String, Vec<SocialQA>)> = admitted
        .par_iter()
        .filter(|r| r.source != SourceKind::Amazon)
        .map(|record| {
            synthesis::synth_social_qa(gateway, &config.synthesis, record)
                .map(|qas| (record.source, record.author_id.clone(), qas))
        })
        .collect::<Result<_>>()?;
    let mut social_qa = Vec::new();
    for (source, user_id, qas) in qa_results {
        for qa in qas {
            social_qa.push(QaRow {
                source,
                user_id: user_id.clone(),
                qa,
            });
        }
    }

    write_jsonl(&paths.synth_dossiers(), &dossiers)?;
    write_jsonl(&paths.synth_rejects(), &rejects)?;
    write_jsonl(&paths.synth_scenarios(), &scenarios)?;
    write_jsonl(&paths.synth_social_qa(), &social_qa)?;
    Ok(())
}

/// What one review call needs, plus which synthesized row it belongs to.
struct QcJob {
    artifact: QcArtifact,
    source: SourceKind,
    source_text: String,
    owner: QcOwner,
}

#[derive(Clone, Copy)]
enum QcOwner {
    Dossier(usize),
    Scenario(usize),
    Qa(usize),
}

fn render_stories(d: &UserDossier) -> String {
    d.stories
        .iter()
        .map(|s| format!("{}\n{}", s.summary, s.narrative))
        .collect::<Vec<_>>()
        .join("\n---\n")
}

fn render_scenario(s: &Scenario) -> String {
    let characters = s
        .characters
        .iter()
        .map(|c| format!("{}: {}", c.name, c.description))
        .collect::<Vec<_>>()
        .join("\n");
    format!(
        "Background:\n{}\n\nCharacters:\n{}\n\nPlots:\n{}",
        s.background, characters, s.plots
    )
}

fn render_qa(qa: &SocialQA) -> String {
    format!(
        "Scenario:\n{}\n\nQuestion:\n{}\n\nAnswer:\n{}",
        qa.scenario_text, qa.question, qa.answer
    )
}

fn run_qc(config: &PipelineConfig, paths: &WorkPaths, gateway: &Gateway) -> Result<()> {
    let matrix = match &config.qc.applicability_override {
        Some(path) => ApplicabilityMatrix::from_json_file(path)?,
        None => ApplicabilityMatrix::default(),
    };
    let qc_config = config.qc.qc_config();

    let dossiers: Vec<DossierRow> = read_jsonl(&paths.synth_dossiers())?;
    let scenarios: Vec<ScenarioRow> = read_jsonl(&paths.synth_scenarios())?;
    let qas: Vec<QaRow> = read_jsonl(&paths.synth_social_qa())?;

    let admitted = load_admitted(config, paths)?;
    let rewritten: BTreeMap<&str, &str> = admitted
        .iter()
        .map(|r| (r.record_id.as_str(), r.rewritten_text.as_str()))
        .collect();
    let contexts: BTreeMap<(String, SourceKind), String> = group_by_user(admitted.clone())
        .iter()
        .map(|log| {
            (
                (log.user_id.clone(), log.source),
                synthesis::user_context(log, config.synthesis.context_budget_chars),
            )
        })
        .collect();

    let mut jobs: Vec<QcJob> = Vec::new();
    for (i, row) in dossiers.iter().enumerate() {
        let d = &row.dossier;
        let ctx = contexts
            .get(&(d.user_id.clone(), row.source))
            .cloned()
            .unwrap_or_default();
        let parts = [
            (ArtifactKind::Persona, d.persona.clone()),
            (ArtifactKind::Profile, d.profile.clone()),
            (ArtifactKind::Stories, render_stories(d)),
            (ArtifactKind::WritingStyle, d.writing_style.clone()),
        ];
        for (kind, text) in parts {
            jobs.push(QcJob {
                artifact: QcArtifact {
                    artifact_id: format!("{}:{}", d.user_id, kind),
                    kind,
                    text,
                },
                source: row.source,
                source_text: ctx.clone(),
                owner: QcOwner::Dossier(i),
            });
        }
    }
    for (i, row) in scenarios.iter().enumerate() {
        let s = &row.scenario;
        jobs.push(QcJob {
            artifact: QcArtifact {
                artifact_id: s.scenario_id.clone(),
                kind: ArtifactKind::Scenario,
                text: render_scenario(s),
            },
            source: row.source,
            source_text: rewritten
                .get(s.source_record_id.as_str())
                .map(|t| t.to_string())
                .unwrap_or_default(),
            owner: QcOwner::Scenario(i),
        });
    }
    for (i, row) in qas.iter().enumerate() {
        let qa = &row.qa;
        jobs.push(QcJob {
            artifact: QcArtifact {
                artifact_id: qa.qa_id.clone(),
                kind: ArtifactKind::SocialQa,
                text: render_qa(qa),
            },
            source: row.source,
            source_text: rewritten
                .get(qa.source_record_id.as_str())
                .map(|t| t.to_string())
                .unwrap_or_default(),
            owner: QcOwner::Qa(i),
        });
    }

    let results: Vec<Outcome<QCReport>> = jobs
        .par_iter()
        .map(|job| qc_score(gateway, &qc_config, &matrix, &job.artifact, &job.source_text))
        .collect::<Result<_>>()?;

    let mut reports = Vec::new();
    let mut verdicts = Vec::new();
    let mut unparseable = Vec::new();
    let mut dossier_keep = vec![true; dossiers.len()];
    let mut scenario_keep = vec![false; scenarios.len()];
    let mut qa_keep = vec![false; qas.len()];
    for (job, outcome) in jobs.iter().zip(results) {
        let keep = match outcome {
            Outcome::Accepted(report) => {
                let keep = crate::qc::qc_gate(&report);
                reports.push(report);
                keep
            }
            Outcome::Rejected { reason } => {
                unparseable.push(RejectRow {
                    id: job.artifact.artifact_id.clone(),
                    reason,
                });
                false
            }
        };
        verdicts.push(QcVerdict {
            artifact_id: job.artifact.artifact_id.clone(),
            artifact_kind: job.artifact.kind,
            source: job.source,
            keep,
        });
        match job.owner {
            // One failing part sinks the whole dossier.
            QcOwner::Dossier(i) => dossier_keep[i] &= keep,
            QcOwner::Scenario(i) => scenario_keep[i] = keep,
            QcOwner::Qa(i) => qa_keep[i] = keep,
        }
    }

    let gated_dossiers: Vec<&DossierRow> = dossiers
        .iter()
        .enumerate()
        .filter(|(i, _)| dossier_keep[*i])
        .map(|(_, r)| r)
        .collect();
    let gated_scenarios: Vec<&ScenarioRow> = scenarios
        .iter()
        .enumerate()
        .filter(|(i, _)| scenario_keep[*i])
        .map(|(_, r)| r)
        .collect();
    let gated_qas: Vec<&QaRow> = qas
        .iter()
        .enumerate()
        .filter(|(i, _)| qa_keep[*i])
        .map(|(_, r)| r)
        .collect();

    write_jsonl(&paths.qc_reports(), &reports)?;
    write_jsonl(&paths.qc_verdicts(), &verdicts)?;
    write_jsonl(&paths.qc_unparseable(), &unparseable)?;
    write_jsonl(&paths.qc_dossiers(), &gated_dossiers)?;
    write_jsonl(&paths.qc_scenarios(), &gated_scenarios)?;
    write_jsonl(&paths.qc_social_qa(), &gated_qas)?;

    let stats = qc_stats(&verdicts);
    let stats_path = paths.qc_stats_file();
    std::fs::write(&stats_path, stats.render())
        .map_err(|e| Error::io(stats_path.display().to_string(), e))?;
    Ok(())
}

/// One short line naming what a text is about, used to seed the
/// writing-imitation prompt. Review records already carry the item name;
/// everything else asks the model.
fn topic_for(
    config: &PipelineConfig,
    gateway: &Gateway,
    record: &CleanRecord,
) -> Result<String> {
    if let Some(meta) = record.meta.as_amazon() {
        return Ok(meta.item_name.clone());
    }
    let template = builtin("topic_summary")?;
    let mut bindings = BTreeMap::new();
    bindings.insert("text".to_string(), record.rewritten_text.clone());
    let prompt = render_prompt(template, &bindings)?;
    let req = ChatRequest::new(
        &config.synthesis.model_name,
        vec![crate::gateway::ChatMessage::user(prompt)],
    )?
    .with_temperature(config.synthesis.temperature);
    let completion = gateway.complete(&req)?;
    let topic = completion.content.trim().lines().next().unwrap_or("").to_string();
    Ok(if topic.is_empty() {
        "everyday life".to_string()
    } else {
        topic
    })
}

fn run_build_tasks(config: &PipelineConfig, paths: &WorkPaths, gateway: &Gateway) -> Result<()> {
    let dossiers: Vec<DossierRow> = read_jsonl(&paths.qc_dossiers())?;
    let scenarios: Vec<ScenarioRow> = read_jsonl(&paths.qc_scenarios())?;
    let qas: Vec<QaRow> = read_jsonl(&paths.qc_social_qa())?;
    let admitted = load_admitted(config, paths)?;
    let logs: BTreeMap<(String, SourceKind), UserLog> = group_by_user(admitted.clone())
        .into_iter()
        .map(|log| ((log.user_id.clone(), log.source), log))
        .collect();
    let dossier_by_user: BTreeMap<(String, SourceKind), &UserDossier> = dossiers
        .iter()
        .map(|row| ((row.dossier.user_id.clone(), row.source), &row.dossier))
        .collect();

    let mut samples: Vec<TrainingSample> = Vec::new();

    for row in &dossiers {
        samples.push(build_profile_generation(&row.dossier, row.source));
    }

    for row in &scenarios {
        samples.push(build_scenario_generation(
            &row.scenario,
            row.source,
            &row.user_id,
        ));
    }

    for row in &qas {
        if let Some(d) = dossier_by_user.get(&(row.user_id.clone(), row.source)) {
            samples.push(build_social_qa(d, &row.qa, row.source, config.seed));
        }
    }

    // Writing imitation: every admitted record of a kept user is a target;
    // only records strictly before it form the history.
    let mut wi_jobs: Vec<(&UserDossier, &UserLog, usize)> = Vec::new();
    for row in &dossiers {
        if let Some(log) = logs.get(&(row.dossier.user_id.clone(), row.source)) {
            for idx in 0..log.records.len() {
                wi_jobs.push((&row.dossier, log, idx));
            }
        }
    }
    let wi_samples: Vec<Option<TrainingSample>> = wi_jobs
        .par_iter()
        .map(|(d, log, idx)| {
            let target = &log.records[*idx];
            let history = &log.records[..*idx];
            let topic = topic_for(config, gateway, target)?;
            match build_writing_imitation(d, target, history, &topic, config.seed) {
                Ok(sample) => Ok(Some(sample)),
                Err(e) => {
                    log::warn!("writing imitation for {}: {e}", target.record_id);
                    Ok(None)
                }
            }
        })
        .collect::<Result<_>>()?;
    samples.extend(wi_samples.into_iter().flatten());

    // Personalized commenting: a user's most recent comment is held out;
    // the freshest admitted post by someone else stands in as the prompt.
    if config.inputs.reddit_comments.is_some() {
        let comments: Vec<RawRecord> = read_jsonl(&paths.ingest_comments())?;
        let mut by_author: BTreeMap<String, Vec<&RawRecord>> = BTreeMap::new();
        for c in &comments {
            by_author.entry(c.author_id.clone()).or_default().push(c);
        }
        let mut posts: Vec<&CleanRecord> = admitted
            .iter()
            .filter(|r| r.source == SourceKind::Reddit)
            .collect();
        posts.sort_by(|a, b| {
            (a.timestamp, a.record_id.as_str()).cmp(&(b.timestamp, b.record_id.as_str()))
        });
        for (author, mut authored) in by_author {
            if authored.len() < 2 {
                continue;
            }
            authored.sort_by(|a, b| {
                (a.timestamp, a.record_id.as_str()).cmp(&(b.timestamp, b.record_id.as_str()))
            });
            let target_raw = authored.pop().expect("len >= 2");
            let history: Vec<CleanRecord> = authored
                .iter()
                .map(|r| CleanRecord::from_raw((*r).clone(), r.text.clone()))
                .collect();
            let target = CleanRecord::from_raw(target_raw.clone(), target_raw.text.clone());
            let new_post = posts
                .iter()
                .rev()
                .find(|p| p.author_id != author && p.timestamp <= target.timestamp)
                .or_else(|| posts.iter().find(|p| p.author_id != author));
            let Some(new_post) = new_post else { continue };
            match build_personalized_commenting(&history, &target, new_post) {
                Ok(sample) => samples.push(sample),
                Err(e) => log::warn!("personalized commenting for {author}: {e}"),
            }
        }
    }

    // Item selection: catalog and histories from the review platform.
    let catalog: BTreeMap<String, String> = admitted
        .iter()
        .filter_map(|r| r.meta.as_amazon().map(|m| (m.item_id.clone(), m.item_name.clone())))
        .collect();
    let pool: Vec<CatalogItem> = catalog
        .iter()
        .map(|(id, name)| CatalogItem {
            item_id: id.clone(),
            item_name: name.clone(),
        })
        .collect();
    for row in &dossiers {
        if row.source != SourceKind::Amazon {
            continue;
        }
        let Some(log) = logs.get(&(row.dossier.user_id.clone(), row.source)) else {
            continue;
        };
        let items: Vec<CatalogItem> = log
            .records
            .iter()
            .filter_map(|r| r.meta.as_amazon())
            .map(|m| CatalogItem {
                item_id: m.item_id.clone(),
                item_name: m.item_name.clone(),
            })
            .collect();
        let Some(positive) = items.last().cloned() else { continue };
        let mut history: Vec<CatalogItem> = Vec::new();
        for item in &items[..items.len() - 1] {
            if item.item_id != positive.item_id
                && !history.iter().any(|h| h.item_id == item.item_id)
            {
                history.push(item.clone());
            }
        }
        match build_item_selection(
            &row.dossier,
            &history,
            &positive,
            &pool,
            ITEM_SELECTION_CANDIDATES,
            row.source,
            config.seed,
        ) {
            Ok(sample) => samples.push(sample),
            Err(e) => log::warn!("item selection for {}: {e}", row.dossier.user_id),
        }
    }

    for sample in &samples {
        sample.validate()?;
        if !sample.leakage_free() {
            return Err(Error::data(format!(
                "sample {}: answer text leaked into the prompt",
                sample.sample_id
            )));
        }
    }

    let samples = match config.tasks.quota {
        Some(quota) => sample_balanced(&samples, quota, config.seed),
        None => samples,
    };
    let (mut train, test) = split_train_test(samples, config.tasks.test_fraction, config.seed)?;

    if let Some(mix) = &config.tasks.mix {
        let general_a: Vec<TrainingSample> = read_jsonl(&mix.general_a)?;
        let general_b: Vec<TrainingSample> = read_jsonl(&mix.general_b)?;
        train = mix_general(
            train,
            general_a,
            general_b,
            (mix.ratio_general_a, mix.ratio_general_b, mix.ratio_tasks),
            config.seed,
        )?;
    }

    write_jsonl(&paths.tasks_train(), &train)?;
    write_jsonl(&paths.tasks_test(), &test)?;
    write_training_config(&paths.tasks_training_config())?;
    Ok(())
}

/// Tasks that become benchmark items. The commenting task stays
/// train-only: its prompt embeds another user's post, which has no
/// clean single-answer framing for a lettered benchmark.
const EVAL_8WAY_TASKS: [TaskKind; 4] = [
    TaskKind::ProfileGeneration,
    TaskKind::ScenarioGeneration,
    TaskKind::SocialQa,
    TaskKind::WritingImitation,
];

fn run_build_eval(config: &PipelineConfig, paths: &WorkPaths, gateway: &Gateway) -> Result<()> {
    let test: Vec<TrainingSample> = read_jsonl(&paths.tasks_test())?;
    let train: Vec<TrainingSample> = read_jsonl(&paths.tasks_train())?;
    let models: Vec<&str> = config.eval.distractor_models.iter().map(|m| m.as_str()).collect();

    let mut items: Vec<EvalItem> = Vec::new();
    let mut audit: Vec<RejectRow> = Vec::new();

    for task in EVAL_8WAY_TASKS {
        // Held-out users first; reach into the training split only when a
        // task has no held-out sample at all, so small corpora still
        // exercise every task.
        let mut candidates: Vec<&TrainingSample> =
            test.iter().filter(|s| s.task == task).collect();
        if candidates.is_empty() {
            candidates = train.iter().filter(|s| s.task == task).collect();
        }
        candidates.truncate(config.eval.per_task_items);
        let task_items: Vec<(String, Result<Outcome<EvalItem>>)> = candidates
            .par_iter()
            .map(|sample| {
                let stem = sample
                    .conversation
                    .iter()
                    .find(|t| t.from == TurnRole::Human)
                    .map(|t| t.value.as_str())
                    .unwrap_or("");
                let item_id = format!("mcq-{}", sample.sample_id);
                let outcome = eval::build_8way_item(
                    &item_id,
                    task,
                    stem,
                    sample.assistant_text(),
                    &models,
                    gateway,
                    derive_seed(config.seed, &format!("eval:{}", sample.sample_id)),
                );
                (item_id, outcome)
            })
            .collect();
        for (item_id, outcome) in task_items {
            match outcome? {
                Outcome::Accepted(item) => items.push(item),
                Outcome::Rejected { reason } => audit.push(RejectRow { id: item_id, reason }),
            }
        }
    }

    // Item selection: rebuilt from interaction histories of kept users.
    let dossiers: Vec<DossierRow> = read_jsonl(&paths.qc_dossiers())?;
    let admitted = load_admitted(config, paths)?;
    let logs: BTreeMap<(String, SourceKind), UserLog> = group_by_user(admitted.clone())
        .into_iter()
        .map(|log| ((log.user_id.clone(), log.source), log))
        .collect();
    let catalog: BTreeMap<String, String> = admitted
        .iter()
        .filter_map(|r| r.meta.as_amazon().map(|m| (m.item_id.clone(), m.item_name.clone())))
        .collect();
    let pool: Vec<CatalogItem> = catalog
        .iter()
        .map(|(id, name)| CatalogItem {
            item_id: id.clone(),
            item_name: name.clone(),
        })
        .collect();
    let mut emitted = 0usize;
    for row in &dossiers {
        if emitted >= config.eval.per_task_items {
            break;
        }
        if row.source != SourceKind::Amazon {
            continue;
        }
        let user_id = &row.dossier.user_id;
        let Some(log) = logs.get(&(user_id.clone(), row.source)) else {
            continue;
        };
        let item_seq: Vec<CatalogItem> = log
            .records
            .iter()
            .filter_map(|r| r.meta.as_amazon())
            .map(|m| CatalogItem {
                item_id: m.item_id.clone(),
                item_name: m.item_name.clone(),
            })
            .collect();
        let Some(positive) = item_seq.last().cloned() else { continue };
        let mut history: Vec<CatalogItem> = Vec::new();
        for item in &item_seq[..item_seq.len() - 1] {
            if item.item_id != positive.item_id
                && !history.iter().any(|h| h.item_id == item.item_id)
            {
                history.push(item.clone());
            }
        }
        let seed = derive_seed(config.seed, &format!("eval-is:{user_id}"));
        match eval::build_item_selection_item(&positive, &history, &pool, seed) {
            Ok(mut item) => {
                item.meta.insert("user_id".to_string(), user_id.clone());
                items.push(item);
                emitted += 1;
            }
            Err(e) => audit.push(RejectRow {
                id: format!("is-{user_id}"),
                reason: e.to_string(),
            }),
        }
    }

    for item in &items {
        item.validate()?;
    }
    write_jsonl(&paths.eval_items(), &items)?;
    write_jsonl(&paths.eval_audit(), &audit)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Stats
// ---------------------------------------------------------------------------

/// One row of the stage-count table. `None` cells mean the pipeline never
/// produces that artifact for the source and render as `--`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub raw_texts: usize,
    pub df_texts: usize,
    pub ds_users: usize,
    pub ds_scenarios: Option<usize>,
    pub ds_social_qa: Option<usize>,
    pub qc_users: usize,
    pub qc_scenarios: Option<usize>,
    pub qc_social_qa: Option<usize>,
}

/// Per-source counts at each pipeline checkpoint, plus a totals row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsTable {
    pub rows: BTreeMap<SourceKind, StatsRow>,
}

impl StatsTable {
    pub fn total(&self) -> StatsRow {
        let mut total = StatsRow {
            ds_scenarios: Some(0),
            ds_social_qa: Some(0),
            qc_scenarios: Some(0),
            qc_social_qa: Some(0),
            ..StatsRow::default()
        };
        for row in self.rows.values() {
            total.raw_texts += row.raw_texts;
            total.df_texts += row.df_texts;
            total.ds_users += row.ds_users;
            total.qc_users += row.qc_users;
            if let Some(n) = row.ds_scenarios {
                *total.ds_scenarios.as_mut().expect("set above") += n;
            }
            if let Some(n) = row.ds_social_qa {
                *total.ds_social_qa.as_mut().expect("set above") += n;
            }
            if let Some(n) = row.qc_scenarios {
                *total.qc_scenarios.as_mut().expect("set above") += n;
            }
            if let Some(n) = row.qc_social_qa {
                *total.qc_social_qa.as_mut().expect("set above") += n;
            }
        }
        total
    }

    /// Fixed-width text table: Raw and After-DF count texts; After-DS and
    /// After-QC count users, scenarios, and social QA. Cells for artifacts
    /// a source never yields show `--`.
    pub fn render(&self) -> String {
        fn cell(v: Option<usize>) -> String {
            match v {
                Some(n) => n.to_string(),
                None => "--".to_string(),
            }
        }
        let mut lines = Vec::new();
        lines.push(format!(
            "{:<10} | {:>9} | {:>9} | {:>7} {:>10} {:>10} | {:>7} {:>10} {:>10}",
            "", "Raw", "After-DF", "After-DS", "", "", "After-QC", "", ""
        ));
        lines.push(format!(
            "{:<10} | {:>9} | {:>9} | {:>7} {:>10} {:>10} | {:>7} {:>10} {:>10}",
            "Source", "Texts", "Texts", "Users", "Scenarios", "Social QA", "Users", "Scenarios",
            "Social QA"
        ));
        lines.push("-".repeat(lines[0].chars().count()));
        let mut emit = |label: &str, row: &StatsRow| {
            lines.push(format!(
                "{:<10} | {:>9} | {:>9} | {:>7} {:>10} {:>10} | {:>7} {:>10} {:>10}",
                label,
                row.raw_texts,
                row.df_texts,
                row.ds_users,
                cell(row.ds_scenarios),
                cell(row.ds_social_qa),
                row.qc_users,
                cell(row.qc_scenarios),
                cell(row.qc_social_qa),
            ));
        };
        for (source, row) in &self.rows {
            emit(&source.to_string(), row);
        }
        let total = self.total();
        emit("Total", &total);
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

fn count_lines(path: &Path) -> Result<usize> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).count())
}

/// Counts per-source artifacts at the Raw, After-DF, After-DS, and
/// After-QC checkpoints by reading the stage outputs on disk. Requires at
/// least the ingest stage to have completed; later checkpoints read as
/// zero until their stages run.
pub fn report_stats(config: &PipelineConfig, manifest: &PipelineManifest) -> Result<StatsTable> {
    if manifest.stage(Stage::Ingest).state != StageState::Done {
        return Err(stage_err(Stage::Ingest, "stats need at least a completed ingest"));
    }
    let paths = WorkPaths::new(&config.work_dir);
    let done = |stage: Stage| manifest.stage(stage).state == StageState::Done;

    let mut rows: BTreeMap<SourceKind, StatsRow> = BTreeMap::new();
    let sources: Vec<SourceKind> = config.inputs.sources().iter().map(|(s, _)| *s).collect();
    for source in &sources {
        let mut row = StatsRow {
            raw_texts: count_lines(&paths.ingest_records(*source))?,
            ..StatsRow::default()
        };
        if done(Stage::Score) {
            row.df_texts = count_lines(&paths.score_admitted(*source))?;
        }
        // A source configured to yield no scenarios (or, for the review
        // platform, no social QA) gets dash cells rather than zeros.
        let has_scenarios = config.synthesis.scenarios_per_record(*source) > 0;
        let has_qa = *source != SourceKind::Amazon;
        row.ds_scenarios = has_scenarios.then_some(0);
        row.ds_social_qa = has_qa.then_some(0);
        row.qc_scenarios = has_scenarios.then_some(0);
        row.qc_social_qa = has_qa.then_some(0);
        rows.insert(*source, row);
    }

    if done(Stage::Synthesize) {
        for d in read_jsonl::<DossierRow>(&paths.synth_dossiers())? {
            if let Some(row) = rows.get_mut(&d.source) {
                row.ds_users += 1;
            }
        }
        for s in read_jsonl::<ScenarioRow>(&paths.synth_scenarios())? {
            if let Some(n) = rows.get_mut(&s.source).and_then(|r| r.ds_scenarios.as_mut()) {
                *n += 1;
            }
        }
        for q in read_jsonl::<QaRow>(&paths.synth_social_qa())? {
            if let Some(n) = rows.get_mut(&q.source).and_then(|r| r.ds_social_qa.as_mut()) {
                *n += 1;
            }
        }
    }
    if done(Stage::Qc) {
        for d in read_jsonl::<DossierRow>(&paths.qc_dossiers())? {
            if let Some(row) = rows.get_mut(&d.source) {
                row.qc_users += 1;
            }
        }
        for s in read_jsonl::<ScenarioRow>(&paths.qc_scenarios())? {
            if let Some(n) = rows.get_mut(&s.source).and_then(|r| r.qc_scenarios.as_mut()) {
                *n += 1;
            }
        }
        for q in read_jsonl::<QaRow>(&paths.qc_social_qa())? {
            if let Some(n) = rows.get_mut(&q.source).and_then(|r| r.qc_social_qa.as_mut()) {
                *n += 1;
            }
        }
    }

    Ok(StatsTable { rows })
}
