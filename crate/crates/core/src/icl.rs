//! Few-shot instance assembly: a query prompt preceded by the user's most
//! recent labeled samples, used identically for corpus emission and for
//! real-time inference.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::digest::derive_seed;
use crate::ingest::{Interaction, Label};
use crate::prompt::{build_user_sequences, render, render_sequence, PromptTemplate, RawSample, RenderedSample};
use crate::{Error, Result};

pub const DEFAULT_NUM_SHOTS: usize = 4;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "snake_case")]
pub enum ShotStrategy {
    #[default]
    Recent,
    Random,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "snake_case")]
pub enum ShotOrder {
    /// Oldest first; the most recent shot sits next to the query.
    #[default]
    Chronological,
    Reverse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclConfig {
    pub num_shots: usize,
    pub strategy: ShotStrategy,
    pub shot_order: ShotOrder,
    pub random_seed: Option<u64>,
}

impl Default for IclConfig {
    fn default() -> Self {
        IclConfig {
            num_shots: DEFAULT_NUM_SHOTS,
            strategy: ShotStrategy::Recent,
            shot_order: ShotOrder::Chronological,
            random_seed: None,
        }
    }
}

impl IclConfig {
    pub fn recent(num_shots: usize) -> Self {
        IclConfig {
            num_shots,
            ..IclConfig::default()
        }
    }

    pub fn random(num_shots: usize, seed: u64) -> Self {
        IclConfig {
            num_shots,
            strategy: ShotStrategy::Random,
            random_seed: Some(seed),
            ..IclConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy == ShotStrategy::Random && self.random_seed.is_none() {
            return Err(Error::Invalid("random shot strategy requires a seed".into()));
        }
        Ok(())
    }
}

/// An assembled instance `x'`: shots with answers, then the unanswered query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclInstance {
    pub user_id: String,
    pub query_index: usize,
    /// Sequence positions of the shots, in serialized order.
    pub shot_indices: Vec<usize>,
    pub shots: Vec<RenderedSample>,
    pub query: RenderedSample,
    pub text: String,
    pub label: Label,
}

impl IclInstance {
    pub fn id(&self) -> String {
        format!("{}#{}", self.user_id, self.query_index)
    }

    pub fn num_shots(&self) -> usize {
        self.shots.len()
    }

    /// Every timestamp visible to the instance (shot targets, shot histories,
    /// query history) must precede the query target.
    pub fn leakage_violations(&self) -> usize {
        let q = self.query.timestamp;
        let query_hist = self.query.raw.history.iter().filter(|h| h.timestamp >= q).count();
        let shots: usize = self
            .shots
            .iter()
            .map(|s| {
                usize::from(s.timestamp >= q)
                    + s.raw.history.iter().filter(|h| h.timestamp >= q).count()
            })
            .sum();
        query_hist + shots
    }
}

pub const SHOT_PREAMBLE: &str =
    "Below are this user's most recent recommendation examples, each followed by the correct answer.";

/// Joins shots and query into the instance text. With no shots the text is
/// the bare query prompt plus the answer cue.
pub fn assemble_text(shots: &[RenderedSample], query: &RenderedSample, template: &PromptTemplate) -> String {
    let mut out = String::new();
    if !shots.is_empty() {
        out.push_str(SHOT_PREAMBLE);
        out.push_str("\n\n");
        for (k, s) in shots.iter().enumerate() {
            out.push_str(&format!("### Example {}\n", k + 1));
            out.push_str(&s.prompt_text);
            out.push_str("\nAnswer: ");
            out.push_str(template.label_word(s.label));
            out.push_str("\n\n");
        }
        out.push_str("### Query\n");
    }
    out.push_str(&query.prompt_text);
    out.push_str("\nAnswer:");
    out
}

/// Positions (ascending) of the shots for a query, chosen among the
/// `eligible` earlier samples.
pub fn select_shot_positions(eligible: usize, user_id: &str, query_index: usize, cfg: &IclConfig) -> Vec<usize> {
    let k = cfg.num_shots.min(eligible);
    match cfg.strategy {
        ShotStrategy::Recent => (eligible - k..eligible).collect(),
        ShotStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(shot_seed(cfg, user_id, query_index));
            let mut picked = sample(&mut rng, eligible, k).into_vec();
            picked.sort_unstable();
            picked
        }
    }
}

/// Seed of the per-query generator used by the random strategy.
pub fn shot_seed(cfg: &IclConfig, user_id: &str, query_index: usize) -> u64 {
    derive_seed(
        cfg.random_seed.unwrap_or(0),
        &format!("{user_id}\u{1f}{query_index}"),
    )
}

fn build_instance(
    candidates: &[RenderedSample],
    query: RenderedSample,
    template: &PromptTemplate,
    cfg: &IclConfig,
) -> IclInstance {
    let eligible = candidates.partition_point(|s| s.timestamp < query.timestamp);
    let mut positions = select_shot_positions(eligible, &query.user_id, query.index, cfg);
    if cfg.shot_order == ShotOrder::Reverse {
        positions.reverse();
    }
    let shots: Vec<RenderedSample> = positions.iter().map(|&p| candidates[p].clone()).collect();
    let text = assemble_text(&shots, &query, template);
    IclInstance {
        user_id: query.user_id.clone(),
        query_index: query.index,
        shot_indices: positions.iter().map(|&p| candidates[p].index).collect(),
        shots,
        label: query.label,
        text,
        query,
    }
}

/// Assembles the instance for sample `n` of one user's rendered sequence.
pub fn assemble_icl(
    sequence: &[RenderedSample],
    n: usize,
    cfg: &IclConfig,
    template: &PromptTemplate,
) -> Result<IclInstance> {
    cfg.validate()?;
    if n >= sequence.len() {
        return Err(Error::OutOfRange(format!(
            "query index {n} for a sequence of {}",
            sequence.len()
        )));
    }
    Ok(build_instance(&sequence[..n], sequence[n].clone(), template, cfg))
}

/// Builds an instance at serving time from the user's latest feedback.
/// Every feed sample must strictly precede the query.
pub fn build_inference_instance(
    feed: &[RawSample],
    query: &RawSample,
    template: &PromptTemplate,
    cfg: &IclConfig,
) -> Result<IclInstance> {
    cfg.validate()?;
    if let Some(bad) = feed.iter().find(|s| s.timestamp >= query.timestamp) {
        return Err(Error::Leakage(format!(
            "feed event at {} is not before query at {}",
            bad.timestamp, query.timestamp
        )));
    }
    let mut feed: Vec<&RawSample> = feed.iter().collect();
    feed.sort_by_key(|s| (s.timestamp, s.index));
    let rendered: Vec<RenderedSample> = feed.into_iter().map(|s| render(s, template)).collect();
    Ok(build_instance(&rendered, render(query, template), template, cfg))
}

/// Renders and assembles every query in `queries` against its user's full
/// chronological stream (which must contain the query events).
pub fn build_eval_instances(
    stream: &[Interaction],
    queries: &[Interaction],
    template: &PromptTemplate,
    cfg: &IclConfig,
    max_history: usize,
) -> Result<Vec<IclInstance>> {
    cfg.validate()?;
    let sequences = build_user_sequences(stream, max_history)?;
    let mut rendered: HashMap<&str, Vec<RenderedSample>> = HashMap::new();
    let mut position: HashMap<(&str, &str, i64), usize> = HashMap::new();
    for (user, samples) in &sequences {
        for s in samples {
            position.insert((user.as_str(), s.target_item_id.as_str(), s.timestamp), s.index);
        }
    }
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let key = (q.user_id.as_str(), q.item_id.as_str(), q.timestamp);
        let n = *position.get(&key).ok_or_else(|| {
            Error::Invalid(format!(
                "query ({}, {}, {}) not found in stream",
                q.user_id, q.item_id, q.timestamp
            ))
        })?;
        let seq = rendered
            .entry(q.user_id.as_str())
            .or_insert_with(|| render_sequence(&sequences[&q.user_id], template));
        out.push(assemble_icl(seq, n, cfg, template)?);
    }
    Ok(out)
}

/// One line of the training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub instruction: String,
    pub output: String,
    pub user: String,
    pub n: usize,
    pub shots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusOptions {
    pub max_history: usize,
    /// Keep samples with an empty history as queries.
    pub include_cold: bool,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            max_history: crate::prompt::DEFAULT_MAX_HISTORY,
            include_cold: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageAttestation {
    pub rule: String,
    pub instances_checked: usize,
    pub violations: usize,
}

/// Contents of `corpus.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub template_digest: String,
    pub icl: IclConfig,
    pub options: CorpusOptions,
    pub records: usize,
    pub users: usize,
    pub cold_records: usize,
    pub shot_histogram: BTreeMap<usize, usize>,
    pub attestation: LeakageAttestation,
    pub corpus_sha256: String,
}

struct HashingWriter<W> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Writes one JSONL record per training sample, ordered by (user, n), and
/// returns the manifest. Fails if any assembled instance would leak.
pub fn emit_training_corpus<W: Write>(
    train: &[Interaction],
    template: &PromptTemplate,
    cfg: &IclConfig,
    opts: &CorpusOptions,
    writer: W,
) -> Result<CorpusManifest> {
    template.validate()?;
    cfg.validate()?;
    let sequences = build_user_sequences(train, opts.max_history)?;
    let mut w = HashingWriter {
        inner: writer,
        hasher: Sha256::new(),
    };
    let io_err = |e| Error::io("<corpus>", e);
    let mut records = 0;
    let mut cold_records = 0;
    let mut histogram = BTreeMap::new();
    let mut violations = 0;
    for samples in sequences.values() {
        let rendered = render_sequence(samples, template);
        for n in 0..rendered.len() {
            if !opts.include_cold && rendered[n].raw.is_cold() {
                continue;
            }
            let inst = assemble_icl(&rendered, n, cfg, template)?;
            violations += inst.leakage_violations();
            let record = CorpusRecord {
                output: template.label_word(inst.label).to_string(),
                user: inst.user_id.clone(),
                n: inst.query_index,
                shots: inst.num_shots(),
                instruction: inst.text,
            };
            serde_json::to_writer(&mut w, &record)?;
            w.write_all(b"\n").map_err(io_err)?;
            records += 1;
            cold_records += usize::from(inst.query.raw.is_cold());
            *histogram.entry(record.shots).or_insert(0) += 1;
        }
    }
    w.flush().map_err(io_err)?;
    if violations > 0 {
        return Err(Error::Leakage(format!(
            "{violations} context events at or after their query target"
        )));
    }
    Ok(CorpusManifest {
        template_digest: template.digest(),
        icl: cfg.clone(),
        options: opts.clone(),
        records,
        users: sequences.len(),
        cold_records,
        shot_histogram: histogram,
        attestation: LeakageAttestation {
            rule: "every shot target, shot history and query history timestamp < query timestamp".into(),
            instances_checked: records,
            violations,
        },
        corpus_sha256: hex::encode(w.hasher.finalize()),
    })
}

/// File variant of [`emit_training_corpus`].
pub fn emit_training_corpus_file(
    train: &[Interaction],
    template: &PromptTemplate,
    cfg: &IclConfig,
    opts: &CorpusOptions,
    path: &Path,
) -> Result<CorpusManifest> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    emit_training_corpus(train, template, cfg, opts, BufWriter::new(file))
}
