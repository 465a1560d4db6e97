//! Command-line front end for the `userforge` pipeline.
//!
//! One binary, fourteen subcommands: the eight pipeline stages, `run` for
//! the whole chain, `stats` for the per-source count table, and the
//! standalone utilities `merge`, `evaluate`, `judge`, and `alpha`.
//!
//! Settings come from one TOML file (`--config`) with per-stage sections;
//! every flag maps onto a config field and wins over it. Live endpoints
//! read their bearer token from `USERFORGE_API_KEY`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 gateway error.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use userforge::agreement::{krippendorff_alpha, Level, RatingsMatrix};
use userforge::error::{Error, Result};
use userforge::eval::{judge_batch, run_eval, EvalItem, JudgeApplication, JudgeSample};
use userforge::gateway::{BackendKind, Gateway};
use userforge::jsonl::read_jsonl;
use userforge::merge::{merge, TensorMap};
use userforge::pipeline::{
    report_stats, run_pipeline, PipelineConfig, PipelineManifest, Stage, StageState, WorkPaths,
};
use userforge::record::SourceKind;

#[derive(Parser)]
#[command(
    name = "userforge",
    version,
    about = "Curates platform dumps into persona corpora, assembles training sets, and scores models",
    max_term_width = 100
)]
struct Cli {
    /// TOML run configuration; individual flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Working directory holding the manifest and stage outputs
    /// (config: work_dir).
    #[arg(long, global = true, value_name = "DIR")]
    work_dir: Option<PathBuf>,

    /// Master seed for every derived random stream (config: seed).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the raw per-source dumps into validated record files.
    Ingest(PipelineArgs),
    /// Apply the per-source keep rules and the review-graph core.
    Filter(PipelineArgs),
    /// Rewrite kept records into clean prose via the gateway.
    Rewrite(PipelineArgs),
    /// Score rewritten records for quality and harmfulness.
    Score(PipelineArgs),
    /// Generate dossiers, scenarios, and social question-answer pairs.
    Synthesize(PipelineArgs),
    /// Review synthesized artifacts and gate them on rubric scores.
    Qc(PipelineArgs),
    /// Assemble, balance, and split the training corpus.
    BuildTasks(PipelineArgs),
    /// Build the multiple-choice benchmark items.
    BuildEval(PipelineArgs),
    /// Run every stage in dependency order, resuming where possible.
    Run(PipelineArgs),
    /// Print the per-source count table for the current run.
    Stats(PipelineArgs),
    /// Average two tensor maps elementwise into a new file.
    Merge(MergeArgs),
    /// Administer a multiple-choice item file to a model.
    Evaluate(EvaluateArgs),
    /// Rubric-judge generated outputs against references.
    Judge(JudgeArgs),
    /// Compute Krippendorff's alpha over a ratings matrix.
    Alpha(AlphaArgs),
}

/// Gateway overrides shared by every command that issues model calls.
#[derive(Args, Clone, Debug, Default)]
struct GatewayArgs {
    /// Inference endpoint URL (config: gateway.endpoint_url). Selects the
    /// live backend unless --backend says otherwise.
    #[arg(long, value_name = "URL")]
    endpoint: Option<String>,

    /// Which backend answers requests (config: gateway.backend).
    #[arg(long, value_enum, value_name = "KIND")]
    backend: Option<BackendChoice>,

    /// Canned-response directory for the mock backend
    /// (config: gateway.fixtures_dir).
    #[arg(long, value_name = "DIR")]
    fixtures_dir: Option<PathBuf>,
}

impl GatewayArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(url) = &self.endpoint {
            cfg.gateway.endpoint_url = url.clone();
            if self.backend.is_none() {
                cfg.gateway.backend = BackendKind::Live;
            }
        }
        if let Some(dir) = &self.fixtures_dir {
            cfg.gateway.fixtures_dir = Some(dir.clone());
        }
        if let Some(choice) = self.backend {
            cfg.gateway.backend = choice.into();
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendChoice {
    Mock,
    Live,
}

impl From<BackendChoice> for BackendKind {
    fn from(choice: BackendChoice) -> BackendKind {
        match choice {
            BackendChoice::Mock => BackendKind::Mock,
            BackendChoice::Live => BackendKind::Live,
        }
    }
}

/// Overrides shared by the stage commands, `run`, and `stats`.
#[derive(Args, Clone, Debug, Default)]
struct PipelineArgs {
    /// Raw submissions dump for the discussion-forum source
    /// (config: inputs.reddit).
    #[arg(long, value_name = "FILE")]
    reddit: Option<PathBuf>,

    /// Raw post dump for the microblog source (config: inputs.twitter).
    #[arg(long, value_name = "FILE")]
    twitter: Option<PathBuf>,

    /// Raw post dump for the long-form blog source
    /// (config: inputs.blogger).
    #[arg(long, value_name = "FILE")]
    blogger: Option<PathBuf>,

    /// Raw review dump for the shopping source (config: inputs.amazon).
    #[arg(long, value_name = "FILE")]
    amazon: Option<PathBuf>,

    /// Comment dump feeding the personalized-commenting task
    /// (config: inputs.reddit_comments).
    #[arg(long, value_name = "FILE")]
    reddit_comments: Option<PathBuf>,

    /// Restrict the run to these sources; repeatable. Equivalent to
    /// leaving the other [inputs] entries unset.
    #[arg(long = "source", value_name = "NAME")]
    sources: Vec<String>,

    /// Minimum reviews per item kept by the review-graph core
    /// (config: filter.item_min).
    #[arg(long, value_name = "N")]
    item_min: Option<usize>,

    /// Minimum reviews per user kept by the review-graph core
    /// (config: filter.user_min).
    #[arg(long, value_name = "N")]
    user_min: Option<usize>,

    /// File with one first-person pronoun per line, for the blog rule
    /// (config: filter.pronouns).
    #[arg(long, value_name = "FILE")]
    pronoun_list: Option<PathBuf>,

    #[command(flatten)]
    gateway: GatewayArgs,
}

impl PipelineArgs {
    fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        if let Some(path) = &self.reddit {
            cfg.inputs.reddit = Some(path.clone());
        }
        if let Some(path) = &self.twitter {
            cfg.inputs.twitter = Some(path.clone());
        }
        if let Some(path) = &self.blogger {
            cfg.inputs.blogger = Some(path.clone());
        }
        if let Some(path) = &self.amazon {
            cfg.inputs.amazon = Some(path.clone());
        }
        if let Some(path) = &self.reddit_comments {
            cfg.inputs.reddit_comments = Some(path.clone());
        }
        if !self.sources.is_empty() {
            let mut keep = BTreeSet::new();
            for name in &self.sources {
                let kind: SourceKind = name.parse().map_err(|_| {
                    Error::config(format!(
                        "unknown source `{name}`; expected reddit, twitter, blogger, or amazon"
                    ))
                })?;
                keep.insert(kind);
            }
            if !keep.contains(&SourceKind::Reddit) {
                cfg.inputs.reddit = None;
                cfg.inputs.reddit_comments = None;
            }
            if !keep.contains(&SourceKind::Twitter) {
                cfg.inputs.twitter = None;
            }
            if !keep.contains(&SourceKind::Blogger) {
                cfg.inputs.blogger = None;
            }
            if !keep.contains(&SourceKind::Amazon) {
                cfg.inputs.amazon = None;
            }
        }
        if let Some(n) = self.item_min {
            cfg.filter.item_min = n;
        }
        if let Some(n) = self.user_min {
            cfg.filter.user_min = n;
        }
        if let Some(path) = &self.pronoun_list {
            cfg.filter.pronouns = read_word_list(path)?;
        }
        self.gateway.apply(cfg);
        Ok(())
    }
}

#[derive(Args, Debug)]
struct MergeArgs {
    /// First tensor map.
    #[arg(long, value_name = "FILE")]
    a: PathBuf,

    /// Second tensor map; must hold the same tensor names and shapes.
    #[arg(long, value_name = "FILE")]
    b: PathBuf,

    /// Interpolation weight on --a, in [0, 1].
    #[arg(long, value_name = "W", default_value_t = 0.5)]
    weight: f64,

    /// Where to write the merged map.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Line-delimited multiple-choice items; external files in the same
    /// schema work too.
    #[arg(long, value_name = "FILE")]
    items: PathBuf,

    /// Model name sent with every answer request.
    #[arg(long, value_name = "NAME")]
    model: String,

    /// Baseline average accuracy; adds the relative-improvement column.
    #[arg(long, value_name = "AVG")]
    baseline: Option<f64>,

    #[command(flatten)]
    gateway: GatewayArgs,
}

#[derive(Args, Debug)]
struct JudgeArgs {
    /// Application whose rubric to score against: profile_generation,
    /// human_explainer, or personalized_writing.
    #[arg(long, value_name = "NAME")]
    application: String,

    /// Line-delimited samples, each {generated, reference, context}.
    #[arg(long, value_name = "FILE")]
    samples: PathBuf,

    /// Judge model name; defaults to the configured review model
    /// (config: qc.model_name).
    #[arg(long, value_name = "NAME")]
    model: Option<String>,

    #[command(flatten)]
    gateway: GatewayArgs,
}

#[derive(Args, Debug)]
struct AlphaArgs {
    /// CSV ratings matrix: one row per unit, one column per rater; empty,
    /// `NA`, or `-` cells mark missing ratings.
    #[arg(long, value_name = "FILE")]
    ratings: PathBuf,

    /// Measurement level of the ratings.
    #[arg(long, value_enum, value_name = "LEVEL", default_value_t = LevelChoice::Interval)]
    level: LevelChoice,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LevelChoice {
    Interval,
    Ordinal,
}

impl From<LevelChoice> for Level {
    fn from(choice: LevelChoice) -> Level {
        match choice {
            LevelChoice::Interval => Level::Interval,
            LevelChoice::Ordinal => Level::Ordinal,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap exits 2 on bad usage by default; this tool reserves 2
            // for data errors, so remap while keeping --help/--version at 0.
            let code = u8::from(err.use_stderr());
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(exit_class(&err))
        }
    }
}

fn exit_class(err: &Error) -> u8 {
    if err.is_gateway() {
        3
    } else if err.is_config() {
        1
    } else {
        2
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(args) => run_stages(cli, args, &[Stage::Ingest]),
        Command::Filter(args) => run_stages(cli, args, &[Stage::Filter]),
        Command::Rewrite(args) => run_stages(cli, args, &[Stage::Rewrite]),
        Command::Score(args) => run_stages(cli, args, &[Stage::Score]),
        Command::Synthesize(args) => run_stages(cli, args, &[Stage::Synthesize]),
        Command::Qc(args) => run_stages(cli, args, &[Stage::Qc]),
        Command::BuildTasks(args) => run_stages(cli, args, &[Stage::BuildTasks]),
        Command::BuildEval(args) => run_stages(cli, args, &[Stage::BuildEval]),
        Command::Run(args) => run_stages(cli, args, &Stage::ALL),
        Command::Stats(args) => cmd_stats(cli, args),
        Command::Merge(args) => cmd_merge(args),
        Command::Evaluate(args) => cmd_evaluate(cli, args),
        Command::Judge(args) => cmd_judge(cli, args),
        Command::Alpha(args) => cmd_alpha(args),
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_toml_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(dir) = &cli.work_dir {
        cfg.work_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run_stages(cli: &Cli, args: &PipelineArgs, stages: &[Stage]) -> Result<()> {
    let mut cfg = load_config(cli)?;
    args.apply(&mut cfg)?;
    let manifest = run_pipeline(&cfg, stages)?;
    print_manifest(&manifest);
    Ok(())
}

fn print_manifest(manifest: &PipelineManifest) {
    println!("run {}", manifest.run_id);
    for stage in Stage::ALL {
        let rec = manifest.stage(stage);
        let digest = if rec.output_digest.is_empty() {
            "-"
        } else {
            &rec.output_digest[..12]
        };
        println!("  {:<12} {:<8} {digest}", stage.as_str(), state_name(rec.state));
    }
    if manifest.all_done() {
        println!("final digest {}", manifest.final_digest());
    }
}

fn state_name(state: StageState) -> &'static str {
    match state {
        StageState::Pending => "pending",
        StageState::Running => "running",
        StageState::Done => "done",
        StageState::Failed => "failed",
    }
}

fn cmd_stats(cli: &Cli, args: &PipelineArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    args.apply(&mut cfg)?;
    let paths = WorkPaths::new(&cfg.work_dir);
    let manifest = PipelineManifest::load(&paths.manifest())?;
    let table = report_stats(&cfg, &manifest)?;
    print!("{}", table.render());
    Ok(())
}

fn cmd_merge(args: &MergeArgs) -> Result<()> {
    let a = TensorMap::load(&args.a)?;
    let b = TensorMap::load(&args.b)?;
    let merged = merge(&a, &b, args.weight)?;
    merged.save(&args.out)?;
    println!(
        "merged {} tensors at weight {} into {}",
        merged.entries.len(),
        args.weight,
        args.out.display()
    );
    Ok(())
}

/// Builds the gateway for a standalone command, defaulting mock fixtures
/// under the working directory exactly as pipeline runs do.
fn build_gateway(cfg: &PipelineConfig) -> Result<Gateway> {
    let mut gateway_cfg = cfg.gateway.clone();
    if gateway_cfg.backend == BackendKind::Mock && gateway_cfg.fixtures_dir.is_none() {
        gateway_cfg.fixtures_dir = Some(WorkPaths::new(&cfg.work_dir).fixtures_dir());
    }
    if gateway_cfg.backend == BackendKind::Mock {
        if let Some(dir) = &gateway_cfg.fixtures_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    Gateway::new(&gateway_cfg)
}

fn cmd_evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    args.gateway.apply(&mut cfg);
    let items: Vec<EvalItem> = read_jsonl(&args.items)?;
    let gateway = build_gateway(&cfg)?;
    let mut report = run_eval(&items, &gateway, &args.model)?;
    if let Some(baseline) = args.baseline {
        report = report.with_baseline(baseline)?;
    }
    let rendered = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::data(format!("serialize report: {e}")))?;
    println!("{rendered}");
    Ok(())
}

fn cmd_judge(cli: &Cli, args: &JudgeArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    args.gateway.apply(&mut cfg);
    let application = JudgeApplication::parse(&args.application).ok_or_else(|| {
        let known: Vec<&str> = JudgeApplication::ALL.iter().map(|a| a.as_str()).collect();
        Error::config(format!(
            "unknown application `{}`; expected one of {}",
            args.application,
            known.join(", ")
        ))
    })?;
    let samples: Vec<JudgeSample> = read_jsonl(&args.samples)?;
    let model = args.model.clone().unwrap_or_else(|| cfg.qc.model_name.clone());
    let gateway = build_gateway(&cfg)?;
    let report = judge_batch(&gateway, &model, application, &samples)?;
    let rendered = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::data(format!("serialize report: {e}")))?;
    println!("{rendered}");
    Ok(())
}

fn cmd_alpha(args: &AlphaArgs) -> Result<()> {
    let ratings = RatingsMatrix::read_csv(&args.ratings)?;
    let value = krippendorff_alpha(&ratings, args.level.into())?;
    println!("{value:.6}");
    Ok(())
}

/// Reads one word per line, ignoring blanks and `#` comments.
fn read_word_list(path: &Path) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let words: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|line| !line.is_empty() && !line.starts_with('#'))
        .map(str::to_string)
        .collect();
    if words.is_empty() {
        return Err(Error::config(format!(
            "word list {} has no entries",
            path.display()
        )));
    }
    Ok(words)
}
