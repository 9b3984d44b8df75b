//! The `recicl` command line.
//!
//! Every command checks its inputs against the manifests that produced
//! them, writes its outputs, then records a [`RunManifest`](crate::manifest::RunManifest).
//! Commands return a human summary and a JSON value; `--json` picks the
//! second.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::digest::json_digest;
use crate::driftsim::{bayes_auc, generate, DriftConfig};
use crate::icl::{assemble_icl, build_eval_instances, emit_training_corpus_file, CorpusOptions, IclConfig, IclInstance, ShotOrder, ShotStrategy};
use crate::ingest::{binarize, kcore_filter, parse_log, Catalog, FieldMap, Interaction, LogFormat, Provenance, ThresholdRule, DEFAULT_MALFORMED_TOLERANCE, DEFAULT_THRESHOLD};
use crate::io::{read_json, read_jsonl, write_json, write_jsonl};
use crate::manifest::{verify_input, ManifestBuilder};
use crate::metrics::{latency_stats, linear_fit, Comparison, EvalReport, Grouping, ScoredExample};
use crate::prompt::{build_user_sequences, render_sequence, PromptTemplate, DEFAULT_MAX_HISTORY};
use crate::scorer::mock::token_count;
use crate::scorer::remote::ENDPOINT_ENV;
use crate::scorer::toy::{train_toy, FeatureMode, Optimizer, ToyModel, ToyScorerParams};
use crate::scorer::{score_batch, AwareMock, BatchResult, BlindMock, CostModelMock, RemoteConfig, RemoteScorer, ScoreOutcome, Scorer};
use crate::temporal::{make_split, partition, PartitionMode, SplitManifest, SplitPlan};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "recicl", version, about = "ICL-format recommendation corpora, scoring and drift metrics")]
pub struct Cli {
    /// Print machine-readable JSON instead of a human summary.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a raw log, binarize ratings and apply the k-core filter.
    Ingest(IngestArgs),
    /// Generate a synthetic catalog with drifting user interests.
    Simulate(SimulateArgs),
    /// Partition a catalog into periods and carve train/val/test files.
    Split(SplitArgs),
    /// Emit the ICL-format training corpus for a training split.
    BuildTrain(BuildTrainArgs),
    /// Train the toy logistic scorer on a training split.
    TrainToy(TrainToyArgs),
    /// Assemble evaluation instances for query events.
    BuildEval(BuildEvalArgs),
    /// Score evaluation instances with a backend.
    Score(ScoreArgs),
    /// AUC, failure counts and latency for a prediction file.
    Eval(EvalArgs),
    /// One evaluation report per test period.
    EvalPeriods(EvalPeriodsArgs),
    /// AUC and latency as the number of shots grows.
    Sweep(SweepArgs),
    /// Render a method comparison as a table, JSON or CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Inferred from the file extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<LogFormat>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value = "user_id")]
    pub field_user: String,
    #[arg(long, default_value = "item_id")]
    pub field_item: String,
    #[arg(long, default_value = "item_title")]
    pub field_title: String,
    #[arg(long, default_value = "rating")]
    pub field_rating: String,
    #[arg(long, default_value = "timestamp")]
    pub field_ts: String,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = ThresholdRule::StrictGreater)]
    pub rule: ThresholdRule,
    #[arg(long, default_value_t = 20)]
    pub min_interactions: usize,
    #[arg(long, default_value_t = DEFAULT_MALFORMED_TOLERANCE)]
    pub malformed_tolerance: f64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub users: usize,
    #[arg(long, default_value_t = 400)]
    pub items: usize,
    #[arg(long, default_value_t = 4)]
    pub clusters: usize,
    #[arg(long, default_value_t = 10)]
    pub periods: usize,
    #[arg(long, default_value_t = 6)]
    pub events_per_period: usize,
    #[arg(long, default_value_t = 0.3)]
    pub drift_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    pub switch_prob: f64,
    #[arg(long, default_value_t = 0.15)]
    pub noise_temp: f64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Seed of the test-period sample.
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub periods: usize,
    #[arg(long, value_enum, default_value_t = PartitionMode::EqualCount)]
    pub mode: PartitionMode,
    /// First training period (inclusive).
    #[arg(long, default_value_t = 0)]
    pub train_start: usize,
    /// Last training period (exclusive).
    #[arg(long, default_value_t = 5)]
    pub train_end: usize,
    #[arg(long, default_value_t = 5000)]
    pub val_size: usize,
    #[arg(long, default_value_t = 9)]
    pub test_period: usize,
    #[arg(long, default_value_t = 5000)]
    pub test_size: usize,
}

#[derive(Debug, Args, Clone)]
pub struct ShotArgs {
    #[arg(long, default_value_t = 4)]
    pub shots: usize,
    #[arg(long, value_enum, default_value_t = ShotStrategy::Recent)]
    pub strategy: ShotStrategy,
    #[arg(long, value_enum, default_value_t = ShotOrder::Chronological)]
    pub shot_order: ShotOrder,
    /// Required with `--strategy random`.
    #[arg(long)]
    pub shot_seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_MAX_HISTORY)]
    pub max_history: usize,
    /// Prompt template file; the built-in template when omitted.
    #[arg(long)]
    pub template: Option<PathBuf>,
}

impl ShotArgs {
    fn icl(&self, num_shots: usize) -> Result<IclConfig> {
        let cfg = IclConfig {
            num_shots,
            strategy: self.strategy,
            shot_order: self.shot_order,
            random_seed: self.shot_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn template(&self, m: &mut ManifestBuilder) -> Result<PromptTemplate> {
        match &self.template {
            Some(path) => {
                m.input(path)?;
                PromptTemplate::from_file(path)
            }
            None => Ok(PromptTemplate::default()),
        }
    }
}

#[derive(Debug, Args)]
pub struct BuildTrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub shots: ShotArgs,
    /// Skip samples whose history is empty.
    #[arg(long)]
    pub drop_cold: bool,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = FeatureMode::IclFormat)]
    pub mode: FeatureMode,
    #[command(flatten)]
    pub shots: ShotArgs,
    #[arg(long, default_value_t = 4)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long, default_value_t = 1 << 16)]
    pub memory_buckets: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = Optimizer::Adagrad)]
    pub optimizer: Optimizer,
}

#[derive(Debug, Args)]
pub struct BuildEvalArgs {
    /// Full chronological stream the shots and histories come from.
    #[arg(long)]
    pub stream: PathBuf,
    /// Query events; each must occur in the stream.
    #[arg(long, num_args = 1.., required = true)]
    pub queries: Vec<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub shots: ShotArgs,
    /// Keep a seeded sample of this many queries per query file.
    #[arg(long, requires = "seed")]
    pub sample_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Toy,
    MockBlind,
    MockAware,
    MockCost,
    Remote,
}

#[derive(Debug, Args, Clone)]
pub struct BackendArgs {
    #[arg(long, value_enum)]
    pub backend: BackendKind,
    /// Trained toy model (toy backend).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, env = ENDPOINT_ENV)]
    pub endpoint: Option<String>,
    #[arg(long, default_value_t = 30_000)]
    pub timeout_ms: u64,
    #[arg(long, default_value_t = 2)]
    pub retries: usize,
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
}

impl BackendArgs {
    fn build(&self, m: &mut ManifestBuilder) -> Result<Box<dyn Scorer>> {
        Ok(match self.backend {
            BackendKind::Toy => {
                let path = self
                    .model
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("toy backend needs --model".into()))?;
                m.input(path)?;
                let artifact: ToyArtifact = read_json(path)?;
                Box::new(artifact.model)
            }
            BackendKind::MockBlind => Box::new(BlindMock),
            BackendKind::MockAware => Box::new(AwareMock),
            BackendKind::MockCost => Box::new(CostModelMock::default()),
            BackendKind::Remote => {
                let endpoint = self.endpoint.clone().unwrap_or_default();
                let mut cfg = RemoteConfig::new(endpoint);
                cfg.timeout = Duration::from_millis(self.timeout_ms);
                cfg.retries = self.retries;
                Box::new(RemoteScorer::new(cfg)?)
            }
        })
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub instances: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Training interactions; adds seen/unseen user groups.
    #[arg(long)]
    pub train: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalPeriodsArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// `split.json` holding the period boundaries.
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// First period to report; defaults to the one after training.
    #[arg(long)]
    pub from: Option<usize>,
    #[arg(long)]
    pub train: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub stream: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub queries: Vec<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub max_shots: usize,
    #[command(flatten)]
    pub shots: ShotArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Comparison JSON: `{"dataset", "ours": {...}, "baselines": [...]}`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub format: ReportFormat,
    /// Write here instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// What `train-toy` writes: the model plus how it was trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyArtifact {
    pub model: ToyModel,
    pub params: ToyScorerParams,
    pub icl: IclConfig,
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub shots: usize,
    pub auc: Option<f64>,
    pub n_scored: usize,
    pub n_failed: usize,
    pub mean_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub mean_tokens: f64,
}

/// A command's result in both renderings.
#[derive(Debug, Clone)]
pub struct Output {
    pub human: String,
    pub json: Value,
}

impl Output {
    fn new(human: impl Into<String>, json: Value) -> Self {
        Output {
            human: human.into(),
            json,
        }
    }
}

/// Process exit code for an outcome.
pub fn exit_code(result: &Result<Output>) -> i32 {
    match result {
        Ok(_) => 0,
        Err(e) if e.is_validation() => 1,
        Err(_) => 2,
    }
}

pub fn run(cli: &Cli, argv: Vec<String>) -> Result<Output> {
    let mut m = ManifestBuilder::new(argv);
    match &cli.command {
        Command::Ingest(a) => ingest(a, m),
        Command::Simulate(a) => simulate(a, m),
        Command::Split(a) => split(a, m),
        Command::BuildTrain(a) => build_train(a, m),
        Command::TrainToy(a) => train(a, m),
        Command::BuildEval(a) => build_eval(a, m),
        Command::Score(a) => score(a, m),
        Command::Eval(a) => eval(a, m),
        Command::EvalPeriods(a) => eval_periods(a, m),
        Command::Sweep(a) => sweep(a, m),
        Command::Report(a) => {
            m.input(&a.input)?;
            report(a)
        }
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

/// Reads labeled interactions written by `ingest`, `simulate` or `split`.
fn load_interactions(path: &Path, m: &mut ManifestBuilder) -> Result<Vec<Interaction>> {
    m.input(path)?;
    let mut rows: Vec<Interaction> = read_jsonl(path)?;
    for (k, r) in rows.iter().enumerate() {
        let problem = match r.validate() {
            Err(reason) => Some(reason),
            Ok(()) => r.require_label().err().map(|e| e.to_string()),
        };
        if let Some(reason) = problem {
            return Err(Error::Invalid(format!("{} line {}: {reason}", path.display(), k + 1)));
        }
    }
    crate::ingest::sort_chronologically(&mut rows);
    Ok(rows)
}

fn ingest(a: &IngestArgs, mut m: ManifestBuilder) -> Result<Output> {
    let input_digest = verify_input(&a.input)?;
    m.input(&a.input)?;
    let format = match a.format {
        Some(f) => f,
        None => match a.input.extension().and_then(|e| e.to_str()) {
            Some("csv") => LogFormat::Csv,
            Some("jsonl") | Some("json") => LogFormat::Jsonl,
            _ => {
                return Err(Error::Invalid(format!(
                    "cannot infer the format of {}; pass --format",
                    a.input.display()
                )))
            }
        },
    };
    let fields = FieldMap {
        user: a.field_user.clone(),
        item: a.field_item.clone(),
        title: a.field_title.clone(),
        rating: a.field_rating.clone(),
        timestamp: a.field_ts.clone(),
    };
    let parsed = parse_log(&a.input, format, &fields, a.malformed_tolerance)?;
    let labeled = binarize(parsed.interactions, a.threshold, a.rule);
    let mut catalog = kcore_filter(labeled, a.min_interactions)?;
    catalog.provenance.source = Some(a.input.display().to_string());
    catalog.provenance.input_digest = Some(input_digest.sha256);
    catalog.provenance.threshold = Some(a.threshold);
    catalog.provenance.rule = Some(a.rule);

    create_parent(&a.output)?;
    write_jsonl(&a.output, &catalog.interactions)?;
    let prov_path = with_suffix(&a.output, ".provenance.json");
    write_json(&prov_path, &catalog.provenance)?;
    m.config_digest(json_digest(&(&fields, a.threshold, a.rule, a.min_interactions)));
    m.output(&a.output)?;
    m.output(&prov_path)?;
    m.write_for_file(&a.output)?;

    let json = json!({
        "rows_total": parsed.rows_total,
        "malformed": parsed.malformed.len(),
        "interactions": catalog.len(),
        "users": catalog.users.len(),
        "items": catalog.items.len(),
        "filter_rounds": catalog.provenance.rounds.len(),
        "output": a.output,
    });
    let human = format!(
        "parsed {} rows ({} malformed); kept {} interactions, {} users, {} items after {} filter rounds\nwrote {}",
        parsed.rows_total,
        parsed.malformed.len(),
        catalog.len(),
        catalog.users.len(),
        catalog.items.len(),
        catalog.provenance.rounds.len(),
        a.output.display()
    );
    Ok(Output::new(human, json))
}

fn simulate(a: &SimulateArgs, mut m: ManifestBuilder) -> Result<Output> {
    let cfg = DriftConfig {
        n_users: a.users,
        n_items: a.items,
        n_clusters: a.clusters,
        periods: a.periods,
        events_per_user_per_period: a.events_per_period,
        drift_rate: a.drift_rate,
        regime_switch_prob: a.switch_prob,
        noise_temp: a.noise_temp,
        seed: a.seed,
        ..DriftConfig::default()
    };
    let gt = generate(&cfg)?;
    create_parent(&a.output)?;
    write_jsonl(&a.output, &gt.catalog.interactions)?;
    let truth_path = with_suffix(&a.output, ".truth.json");
    write_json(&truth_path, &gt.sidecar())?;
    m.config_digest(json_digest(&cfg));
    m.seed("simulate", a.seed);
    m.output(&a.output)?;
    m.output(&truth_path)?;
    m.write_for_file(&a.output)?;

    let bayes: Vec<Option<f64>> = (0..cfg.periods).map(|t| bayes_auc(&gt, t).ok()).collect();
    let mut human = format!(
        "simulated {} interactions for {} users over {} periods\nwrote {}\nbayes AUC per period:",
        gt.catalog.len(),
        cfg.n_users,
        cfg.periods,
        a.output.display()
    );
    for b in &bayes {
        match b {
            Some(v) => write!(human, " {v:.4}").unwrap(),
            None => human.push_str(" -"),
        }
    }
    let json = json!({
        "interactions": gt.catalog.len(),
        "users": cfg.n_users,
        "periods": cfg.periods,
        "bayes_auc": bayes,
        "output": a.output,
        "truth": truth_path,
    });
    Ok(Output::new(human, json))
}

fn split(a: &SplitArgs, mut m: ManifestBuilder) -> Result<Output> {
    let rows = load_interactions(&a.catalog, &mut m)?;
    let catalog = Catalog::new(rows, Provenance::default());
    let pd = partition(&catalog, a.periods, a.mode)?;
    let plan = SplitPlan {
        train_periods: a.train_start..a.train_end,
        val_size: a.val_size,
        test_period: a.test_period,
        test_size: a.test_size,
        seed: a.seed,
    };
    let s = make_split(&pd, &plan)?;
    let manifest = SplitManifest::new(&pd, &plan, &s);

    let dir = &a.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (name, rows) in [("train.jsonl", &s.train), ("val.jsonl", &s.val), ("test.jsonl", &s.test)] {
        let path = dir.join(name);
        write_jsonl(&path, rows)?;
        written.push(path);
    }
    for (t, rows) in pd.periods.iter().enumerate() {
        let path = dir.join(format!("period_{t}.jsonl"));
        write_jsonl(&path, rows)?;
        written.push(path);
    }
    let split_path = dir.join("split.json");
    write_json(&split_path, &manifest)?;
    written.push(split_path);
    m.config_digest(json_digest(&(&plan, a.periods, a.mode)));
    m.seed("split", a.seed);
    for p in &written {
        m.output(p)?;
    }
    m.write_for_dir(dir)?;

    let human = format!(
        "{} periods, sizes {:?}\ntrain {} / val {} / test {} (period {})\nwrote {}",
        manifest.num_periods,
        manifest.period_sizes,
        manifest.train_count,
        manifest.val_count,
        manifest.test_count,
        plan.test_period,
        dir.display()
    );
    Ok(Output::new(human, serde_json::to_value(&manifest)?))
}

fn build_train(a: &BuildTrainArgs, mut m: ManifestBuilder) -> Result<Output> {
    let train = load_interactions(&a.train, &mut m)?;
    let template = a.shots.template(&mut m)?;
    let icl = a.shots.icl(a.shots.shots)?;
    let opts = CorpusOptions {
        max_history: a.shots.max_history,
        include_cold: !a.drop_cold,
    };
    create_parent(&a.output)?;
    let corpus = emit_training_corpus_file(&train, &template, &icl, &opts, &a.output)?;
    let stem = a.output.file_stem().unwrap_or_default().to_string_lossy().to_string();
    let manifest_path = a.output.with_file_name(format!("{stem}.manifest.json"));
    write_json(&manifest_path, &corpus)?;
    m.config_digest(json_digest(&(&icl, &opts, template.digest())));
    if let Some(s) = icl.random_seed {
        m.seed("shots", s);
    }
    m.output(&a.output)?;
    m.output(&manifest_path)?;
    m.write_for_file(&a.output)?;

    let human = format!(
        "{} records from {} users ({} cold), shot histogram {:?}, leakage violations {}\ncorpus sha256 {}\nwrote {}",
        corpus.records,
        corpus.users,
        corpus.cold_records,
        corpus.shot_histogram,
        corpus.attestation.violations,
        corpus.corpus_sha256,
        a.output.display()
    );
    Ok(Output::new(human, serde_json::to_value(&corpus)?))
}

fn train(a: &TrainToyArgs, mut m: ManifestBuilder) -> Result<Output> {
    let train = load_interactions(&a.train, &mut m)?;
    let template = a.shots.template(&mut m)?;
    let icl = a.shots.icl(a.shots.shots)?;
    let sequences = build_user_sequences(&train, a.shots.max_history)?;
    let mut instances = Vec::new();
    for samples in sequences.values() {
        let rendered = render_sequence(samples, &template);
        for n in 0..rendered.len() {
            instances.push(assemble_icl(&rendered, n, &icl, &template)?);
        }
    }
    let params = ToyScorerParams {
        mode: a.mode,
        memory_buckets: a.memory_buckets,
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        l2: a.l2,
        batch_size: a.batch_size,
        optimizer: a.optimizer,
        seed: a.seed,
        initial_weights: None,
    };
    let outcome = train_toy(&instances, &params)?;
    let artifact = ToyArtifact {
        model: outcome.model,
        params,
        icl,
        final_loss: outcome.final_loss,
        loss_history: outcome.loss_history,
        instances: instances.len(),
    };
    create_parent(&a.output)?;
    write_json(&a.output, &artifact)?;
    m.config_digest(json_digest(&(&artifact.params, &artifact.icl)));
    m.seed("train", a.seed);
    m.output(&a.output)?;
    m.write_for_file(&a.output)?;

    let human = format!(
        "trained {:?} toy scorer on {} instances, final loss {:.5}\nwrote {}",
        a.mode,
        artifact.instances,
        artifact.final_loss,
        a.output.display()
    );
    let json = json!({
        "instances": artifact.instances,
        "final_loss": artifact.final_loss,
        "loss_history": artifact.loss_history,
        "dense_weights": &artifact.model.weights[..crate::scorer::toy::DENSE_FEATURES],
        "output": a.output,
    });
    Ok(Output::new(human, json))
}

fn load_queries(
    files: &[PathBuf],
    sample_size: Option<usize>,
    seed: Option<u64>,
    m: &mut ManifestBuilder,
) -> Result<Vec<Interaction>> {
    let mut queries = Vec::new();
    for (k, path) in files.iter().enumerate() {
        let rows = load_interactions(path, m)?;
        match (sample_size, seed) {
            (Some(n), Some(s)) if n < rows.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(crate::digest::derive_seed(s, &k.to_string()));
                let mut idx = sample(&mut rng, rows.len(), n).into_vec();
                idx.sort_unstable();
                queries.extend(idx.into_iter().map(|i| rows[i].clone()));
            }
            _ => queries.extend(rows),
        }
    }
    Ok(queries)
}

fn build_eval(a: &BuildEvalArgs, mut m: ManifestBuilder) -> Result<Output> {
    let stream = load_interactions(&a.stream, &mut m)?;
    let queries = load_queries(&a.queries, a.sample_size, a.seed, &mut m)?;
    let template = a.shots.template(&mut m)?;
    let icl = a.shots.icl(a.shots.shots)?;
    let instances = build_eval_instances(&stream, &queries, &template, &icl, a.shots.max_history)?;
    let violations: usize = instances.iter().map(IclInstance::leakage_violations).sum();
    if violations > 0 {
        return Err(Error::Leakage(format!("{violations} context events at or after their query")));
    }
    create_parent(&a.output)?;
    write_jsonl(&a.output, &instances)?;
    m.config_digest(json_digest(&(&icl, a.shots.max_history, template.digest())));
    if let Some(s) = a.seed {
        m.seed("query_sample", s);
    }
    if let Some(s) = icl.random_seed {
        m.seed("shots", s);
    }
    m.output(&a.output)?;
    m.write_for_file(&a.output)?;

    let human = format!("assembled {} instances\nwrote {}", instances.len(), a.output.display());
    Ok(Output::new(human, json!({"instances": instances.len(), "output": a.output})))
}

fn batch_summary(batch: &BatchResult) -> (usize, usize) {
    let scored = batch.outcomes.len() - batch.n_failed();
    (scored, batch.n_failed())
}

fn score(a: &ScoreArgs, mut m: ManifestBuilder) -> Result<Output> {
    m.input(&a.instances)?;
    let instances: Vec<IclInstance> = read_jsonl(&a.instances)?;
    let backend = a.backend.build(&mut m)?;
    let batch = score_batch(&instances, backend.as_ref(), a.backend.max_in_flight)?;
    create_parent(&a.output)?;
    write_jsonl(&a.output, &batch.outcomes)?;
    m.config_digest(json_digest(&(backend.tag(), a.backend.retries, a.backend.timeout_ms)));
    m.output(&a.output)?;
    m.write_for_file(&a.output)?;

    let (scored, failed) = batch_summary(&batch);
    let human = format!(
        "scored {scored} instances with {} ({failed} failed) in {:.1} ms\nwrote {}",
        backend.tag(),
        batch.wall_time_ms,
        a.output.display()
    );
    let json = json!({
        "backend": backend.tag(),
        "n_scored": scored,
        "n_failed": failed,
        "wall_time_ms": batch.wall_time_ms,
        "output": a.output,
    });
    Ok(Output::new(human, json))
}

struct LoadedPredictions {
    examples: Vec<ScoredExample>,
    latencies: Vec<f64>,
    /// Timestamps of failed instances.
    failed: Vec<i64>,
    digest: String,
}

fn load_predictions(path: &Path, m: &mut ManifestBuilder) -> Result<LoadedPredictions> {
    let digest = verify_input(path)?.sha256;
    m.input(path)?;
    let outcomes: Vec<ScoreOutcome> = read_jsonl(path)?;
    let mut out = LoadedPredictions {
        examples: Vec::new(),
        latencies: Vec::new(),
        failed: Vec::new(),
        digest,
    };
    for o in outcomes {
        match o {
            ScoreOutcome::Scored(p) => {
                out.latencies.push(p.latency_ms);
                out.examples.push(ScoredExample {
                    user_id: p.user_id,
                    timestamp: p.timestamp,
                    p_yes: p.p_yes,
                    label: p.label,
                });
            }
            ScoreOutcome::Failed { timestamp, .. } => out.failed.push(timestamp),
        }
    }
    Ok(out)
}

fn training_users(path: &Option<PathBuf>, m: &mut ManifestBuilder) -> Result<Option<HashSet<String>>> {
    match path {
        Some(p) => Ok(Some(
            load_interactions(p, m)?.into_iter().map(|i| i.user_id).collect(),
        )),
        None => Ok(None),
    }
}

fn report_line(name: &str, r: &EvalReport) -> String {
    let auc = r.auc.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    let mut line = format!(
        "{name}: AUC {auc}  scored {}  failed {}{}  latency mean {:.2} ms p95 {:.2} ms",
        r.n_scored,
        r.n_failed,
        if r.partial { " (partial)" } else { "" },
        r.latency.mean_ms,
        r.latency.p95_ms
    );
    for (g, ga) in &r.groups {
        let auc = ga.auc.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        write!(line, "\n  {g}: AUC {auc} over {} events", ga.count).unwrap();
    }
    line
}

fn eval(a: &EvalArgs, mut m: ManifestBuilder) -> Result<Output> {
    let preds = load_predictions(&a.predictions, &mut m)?;
    let users = training_users(&a.train, &mut m)?;
    let grouping = users.as_ref().map(Grouping::SeenUnseen);
    let report = EvalReport::build(
        &preds.examples,
        preds.failed.len(),
        &preds.latencies,
        grouping.as_ref(),
        preds.digest,
    );
    create_parent(&a.output)?;
    write_json(&a.output, &report)?;
    m.output(&a.output)?;
    m.write_for_file(&a.output)?;
    Ok(Output::new(report_line("all", &report), serde_json::to_value(&report)?))
}

fn eval_periods(a: &EvalPeriodsArgs, mut m: ManifestBuilder) -> Result<Output> {
    let preds = load_predictions(&a.predictions, &mut m)?;
    m.input(&a.split)?;
    let split: SplitManifest = read_json(&a.split)?;
    let users = training_users(&a.train, &mut m)?;
    let grouping = users.as_ref().map(Grouping::SeenUnseen);
    let from = a.from.unwrap_or(split.plan.train_periods.end);
    if from >= split.num_periods {
        return Err(Error::OutOfRange(format!(
            "first period {from} with {} periods",
            split.num_periods
        )));
    }
    let period_of = |ts: i64| split.boundaries.partition_point(|&b| b <= ts);

    let dir = &a.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut reports = BTreeMap::new();
    let mut csv_rows = Vec::new();
    let mut human = String::new();
    for t in from..split.num_periods {
        let (examples, latencies): (Vec<ScoredExample>, Vec<f64>) = preds
            .examples
            .iter()
            .zip(&preds.latencies)
            .filter(|(e, _)| period_of(e.timestamp) == t)
            .map(|(e, l)| (e.clone(), *l))
            .unzip();
        let failed = preds.failed.iter().filter(|&&ts| period_of(ts) == t).count();
        let report = EvalReport::build(&examples, failed, &latencies, grouping.as_ref(), preds.digest.clone());
        let path = dir.join(format!("period_{t}.json"));
        write_json(&path, &report)?;
        m.output(&path)?;
        writeln!(human, "{}", report_line(&format!("D{t}"), &report)).unwrap();
        csv_rows.push((t, report.auc, report.n_scored, report.n_failed));
        reports.insert(format!("period_{t}"), report);
    }
    let csv_path = dir.join("periods.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Invalid(e.to_string()))?;
    w.write_record(["period", "auc", "n_scored", "n_failed"])?;
    for (t, auc, n, f) in &csv_rows {
        w.write_record([
            t.to_string(),
            auc.map_or(String::new(), |v| v.to_string()),
            n.to_string(),
            f.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    drop(w);
    m.output(&csv_path)?;
    m.write_for_dir(dir)?;
    write!(human, "wrote {}", dir.display()).unwrap();
    Ok(Output::new(human, serde_json::to_value(&reports)?))
}

fn sweep(a: &SweepArgs, mut m: ManifestBuilder) -> Result<Output> {
    let stream = load_interactions(&a.stream, &mut m)?;
    let queries = load_queries(&a.queries, None, None, &mut m)?;
    let template = a.shots.template(&mut m)?;
    let backend = a.backend.build(&mut m)?;
    let mut rows = Vec::new();
    for shots in 0..=a.max_shots {
        let icl = a.shots.icl(shots)?;
        let instances = build_eval_instances(&stream, &queries, &template, &icl, a.shots.max_history)?;
        let batch = score_batch(&instances, backend.as_ref(), a.backend.max_in_flight)?;
        let preds: Vec<_> = batch.predictions().collect();
        let scores: Vec<f64> = preds.iter().map(|p| p.p_yes).collect();
        let labels: Vec<bool> = preds.iter().map(|p| p.label).collect();
        let lat: Vec<f64> = preds.iter().map(|p| p.latency_ms).collect();
        let stats = latency_stats(&lat);
        let tokens: f64 = instances.iter().map(|i| token_count(&i.text) as f64).sum::<f64>()
            / instances.len().max(1) as f64;
        rows.push(SweepRow {
            shots,
            auc: crate::metrics::auc(&scores, &labels).ok(),
            n_scored: preds.len(),
            n_failed: batch.n_failed(),
            mean_latency_ms: stats.mean_ms,
            p95_latency_ms: stats.p95_ms,
            mean_tokens: tokens,
        });
    }
    create_parent(&a.output)?;
    let mut w = csv::Writer::from_path(&a.output).map_err(|e| Error::Invalid(e.to_string()))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&a.output, e))?;
    drop(w);
    m.config_digest(json_digest(&(backend.tag(), &a.shots.strategy, a.max_shots)));
    if let Some(s) = a.shots.shot_seed {
        m.seed("shots", s);
    }
    m.output(&a.output)?;
    m.write_for_file(&a.output)?;

    let x: Vec<f64> = rows.iter().map(|r| r.shots as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.mean_latency_ms).collect();
    let (intercept, slope, r2) = linear_fit(&x, &y);
    let mut human = format!("{:>5} {:>8} {:>8} {:>12} {:>10}\n", "shots", "AUC", "failed", "latency ms", "tokens");
    for r in &rows {
        writeln!(
            human,
            "{:>5} {:>8} {:>8} {:>12.3} {:>10.1}",
            r.shots,
            r.auc.map_or("-".to_string(), |v| format!("{v:.4}")),
            r.n_failed,
            r.mean_latency_ms,
            r.mean_tokens
        )
        .unwrap();
    }
    write!(human, "latency ~ {intercept:.3} + {slope:.3} * shots (R^2 {r2:.4})\nwrote {}", a.output.display()).unwrap();
    let json = json!({
        "rows": rows,
        "latency_fit": {"intercept": intercept, "slope": slope, "r2": r2},
        "output": a.output,
    });
    Ok(Output::new(human, json))
}

fn report(a: &ReportArgs) -> Result<Output> {
    let cmp: Comparison = read_json(&a.input)?;
    let rows = cmp.rows();
    let text = match a.format {
        ReportFormat::Table => cmp.render_table(),
        ReportFormat::Json => serde_json::to_string_pretty(&rows)? + "\n",
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &rows {
                w.serialize(r)?;
            }
            String::from_utf8(w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?)
                .map_err(|e| Error::Invalid(e.to_string()))?
        }
    };
    let json = serde_json::to_value(&rows)?;
    match &a.output {
        Some(path) => {
            create_parent(path)?;
            std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
            Ok(Output::new(format!("wrote {}", path.display()), json))
        }
        None => Ok(Output::new(text.trim_end().to_string(), json)),
    }
}
