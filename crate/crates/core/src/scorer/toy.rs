//! A small logistic scorer trained with cross-entropy on ICL instances.
//!
//! It stands in for a fine-tuned language model at desk scale: features are
//! read from the structured samples inside an instance rather than from
//! text. Five dense features
//!
//! | idx | feature |
//! |-----|---------|
//! | 0 | bias |
//! | 1 | mean shot label - 0.5 |
//! | 2 | similarity-weighted shot label in [-1, 1] |
//! | 3 | query history positive rate - 0.5 |
//! | 4 | mean target/history title-token Jaccard overlap |
//!
//! are followed by two hashed tables of `memory_buckets` weights each: one
//! keyed by target title token, one by (user, target title token). The
//! second lets the model memorize per-user tastes from its training window.
//! In [`FeatureMode::Plain`] features 1 and 2 are always zero.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BackendScore, Scorer};
use crate::digest::fnv1a;
use crate::icl::IclInstance;
use crate::prompt::RawSample;
use crate::{Error, Result};

pub const DENSE_FEATURES: usize = 5;

pub const DENSE_FEATURE_NAMES: [&str; DENSE_FEATURES] = [
    "bias",
    "shot_label_mean",
    "shot_similarity",
    "history_positive_rate",
    "history_title_overlap",
];

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    #[default]
    IclFormat,
    Plain,
}

/// Lowercased alphanumeric tokens, sorted and deduplicated.
pub fn title_tokens(title: &str) -> Vec<String> {
    title
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Jaccard overlap of two sorted token lists.
pub fn jaccard(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}

pub fn mean_shot_label(shots: &[&RawSample]) -> Option<f64> {
    if shots.is_empty() {
        return None;
    }
    Some(shots.iter().map(|s| s.label.as_f64()).sum::<f64>() / shots.len() as f64)
}

/// `sum(sim_s * (2 y_s - 1)) / sum(sim_s)` over shots, where `sim_s` is the
/// title overlap between the shot's target and the query target; 0 when no
/// shot overlaps.
pub fn shot_similarity(query: &RawSample, shots: &[&RawSample]) -> f64 {
    let q = title_tokens(&query.target_title);
    let (mut num, mut den) = (0.0, 0.0);
    for s in shots {
        let sim = jaccard(&q, &title_tokens(&s.target_title));
        num += sim * (2.0 * s.label.as_f64() - 1.0);
        den += sim;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseFeatures {
    pub idx: Vec<u32>,
    pub val: Vec<f64>,
}

impl SparseFeatures {
    fn push(&mut self, i: usize, v: f64) {
        if v != 0.0 {
            self.idx.push(i as u32);
            self.val.push(v);
        }
    }

    pub fn dot(&self, w: &[f64]) -> f64 {
        self.idx
            .iter()
            .zip(&self.val)
            .map(|(&i, &v)| w[i as usize] * v)
            .sum()
    }

    /// Value of feature `i` (summing hashed collisions).
    pub fn get(&self, i: usize) -> f64 {
        self.idx
            .iter()
            .zip(&self.val)
            .filter(|(&k, _)| k as usize == i)
            .map(|(_, &v)| v)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub mode: FeatureMode,
    pub memory_buckets: usize,
}

impl FeatureSpec {
    pub fn dim(&self) -> usize {
        DENSE_FEATURES + 2 * self.memory_buckets
    }
}

/// Features of a query given the raw samples of its shots.
pub fn featurize_parts(query: &RawSample, shots: &[&RawSample], spec: &FeatureSpec) -> SparseFeatures {
    let mut f = SparseFeatures::default();
    f.push(0, 1.0);
    if spec.mode == FeatureMode::IclFormat {
        if let Some(m) = mean_shot_label(shots) {
            f.push(1, m - 0.5);
        }
        f.push(2, shot_similarity(query, shots));
    }
    let target = title_tokens(&query.target_title);
    if !query.history.is_empty() {
        let n = query.history.len() as f64;
        let pos = query.history.iter().filter(|h| h.label.is_yes()).count() as f64;
        f.push(3, pos / n - 0.5);
        let overlap: f64 = query
            .history
            .iter()
            .map(|h| jaccard(&target, &title_tokens(&h.title)))
            .sum();
        f.push(4, overlap / n);
    }
    let b = spec.memory_buckets;
    if b > 0 {
        for tok in &target {
            let item_slot = fnv1a(format!("item\u{1f}{tok}").as_bytes()) % b as u64;
            f.push(DENSE_FEATURES + item_slot as usize, 1.0);
            let user_slot = fnv1a(format!("user\u{1f}{}\u{1f}{tok}", query.user_id).as_bytes()) % b as u64;
            f.push(DENSE_FEATURES + b + user_slot as usize, 1.0);
        }
    }
    f
}

pub fn featurize(instance: &IclInstance, spec: &FeatureSpec) -> SparseFeatures {
    let shots: Vec<&RawSample> = instance.shots.iter().map(|s| &s.raw).collect();
    featurize_parts(&instance.query.raw, &shots, spec)
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Full-batch gradient descent with a fixed step.
    GradientDescent,
    /// Mini-batch AdaGrad; L2 is applied to the coordinates active in a batch.
    #[default]
    Adagrad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScorerParams {
    pub mode: FeatureMode,
    pub memory_buckets: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Starting weights; zeros when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_weights: Option<Vec<f64>>,
}

impl Default for ToyScorerParams {
    fn default() -> Self {
        ToyScorerParams {
            mode: FeatureMode::IclFormat,
            memory_buckets: 1 << 16,
            learning_rate: 0.1,
            epochs: 4,
            l2: 1e-4,
            batch_size: 32,
            optimizer: Optimizer::Adagrad,
            seed: 0,
            initial_weights: None,
        }
    }
}

impl ToyScorerParams {
    pub fn spec(&self) -> FeatureSpec {
        FeatureSpec {
            mode: self.mode,
            memory_buckets: self.memory_buckets,
        }
    }
}

/// Trained weights plus the feature layout they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub spec: FeatureSpec,
    pub weights: Vec<f64>,
}

impl ToyModel {
    pub fn predict_features(&self, f: &SparseFeatures) -> f64 {
        sigmoid(f.dot(&self.weights))
    }

    pub fn predict(&self, instance: &IclInstance) -> f64 {
        self.predict_features(&featurize(instance, &self.spec))
    }
}

impl Scorer for ToyModel {
    fn tag(&self) -> &str {
        match self.spec.mode {
            FeatureMode::IclFormat => "toy-icl",
            FeatureMode::Plain => "toy-plain",
        }
    }

    fn score_instance(&self, instance: &IclInstance) -> Result<BackendScore> {
        Ok(self.predict(instance).into())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub final_loss: f64,
    /// Objective after each epoch.
    pub loss_history: Vec<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-log p(y | z)` for a logit `z`.
pub fn cross_entropy(z: f64, y: bool) -> f64 {
    let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
    if y {
        softplus - z
    } else {
        softplus
    }
}

pub type Example = (SparseFeatures, bool);

/// Mean cross-entropy plus `l2 / 2 * |w|^2`, and its gradient.
pub fn objective(weights: &[f64], examples: &[Example], l2: f64) -> (f64, Vec<f64>) {
    let n = examples.len().max(1) as f64;
    let mut grad: Vec<f64> = weights.iter().map(|w| l2 * w).collect();
    let mut loss = 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    for (f, y) in examples {
        let z = f.dot(weights);
        loss += cross_entropy(z, *y) / n;
        let g = (sigmoid(z) - f64::from(u8::from(*y))) / n;
        for (&i, &v) in f.idx.iter().zip(&f.val) {
            grad[i as usize] += g * v;
        }
    }
    (loss, grad)
}

pub fn objective_loss(weights: &[f64], examples: &[Example], l2: f64) -> f64 {
    let n = examples.len().max(1) as f64;
    let data: f64 = examples
        .iter()
        .map(|(f, y)| cross_entropy(f.dot(weights), *y))
        .sum::<f64>()
        / n;
    data + 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>()
}

fn check_finite(loss: f64, epoch: usize, w: &[f64]) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    Err(Error::NonFiniteLoss {
        epoch,
        loss,
        max_weight: w.iter().fold(0.0f64, |m, x| m.max(x.abs())),
    })
}

pub fn train_toy(corpus: &[IclInstance], params: &ToyScorerParams) -> Result<TrainOutcome> {
    let spec = params.spec();
    let examples: Vec<Example> = corpus
        .iter()
        .map(|inst| (featurize(inst, &spec), inst.label.is_yes()))
        .collect();
    train_on_features(&examples, params)
}

/// Minimizes [`objective`] over pre-computed features.
pub fn train_on_features(examples: &[Example], params: &ToyScorerParams) -> Result<TrainOutcome> {
    if examples.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    let spec = params.spec();
    let dim = spec.dim();
    let mut w = match &params.initial_weights {
        Some(init) if init.len() != dim => {
            return Err(Error::Invalid(format!(
                "initial weights have length {}, feature layout needs {dim}",
                init.len()
            )))
        }
        Some(init) => init.clone(),
        None => vec![0.0; dim],
    };
    if params.batch_size == 0 {
        return Err(Error::Invalid("batch_size must be positive".into()));
    }
    let mut history = Vec::with_capacity(params.epochs);

    match params.optimizer {
        Optimizer::GradientDescent => {
            for epoch in 0..params.epochs {
                let (loss, grad) = objective(&w, examples, params.l2);
                check_finite(loss, epoch, &w)?;
                for (wi, gi) in w.iter_mut().zip(&grad) {
                    *wi -= params.learning_rate * gi;
                }
                history.push(objective_loss(&w, examples, params.l2));
            }
        }
        Optimizer::Adagrad => {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            let mut order: Vec<usize> = (0..examples.len()).collect();
            let mut accum = vec![0.0f64; dim];
            let mut scratch = vec![0.0f64; dim];
            let mut active = vec![false; dim];
            let mut touched: Vec<usize> = Vec::new();
            for epoch in 0..params.epochs {
                order.shuffle(&mut rng);
                for batch in order.chunks(params.batch_size) {
                    let scale = 1.0 / batch.len() as f64;
                    for &k in batch {
                        let (f, y) = &examples[k];
                        let g = (sigmoid(f.dot(&w)) - f64::from(u8::from(*y))) * scale;
                        for (&i, &v) in f.idx.iter().zip(&f.val) {
                            let i = i as usize;
                            scratch[i] += g * v;
                            if !active[i] {
                                active[i] = true;
                                touched.push(i);
                            }
                        }
                    }
                    for &i in &touched {
                        let gi = scratch[i] + params.l2 * w[i];
                        accum[i] += gi * gi;
                        w[i] -= params.learning_rate * gi / (accum[i].sqrt() + 1e-8);
                        scratch[i] = 0.0;
                        active[i] = false;
                    }
                    touched.clear();
                }
                let loss = objective_loss(&w, examples, params.l2);
                check_finite(loss, epoch, &w)?;
                history.push(loss);
            }
        }
    }
    let final_loss = match history.last() {
        Some(&l) => l,
        None => objective_loss(&w, examples, params.l2),
    };
    check_finite(final_loss, params.epochs, &w)?;
    Ok(TrainOutcome {
        model: ToyModel { spec, weights: w },
        final_loss,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Label;
    use crate::prompt::HistoryEntry;

    fn raw(target: &str, label: bool, history: &[(&str, bool)]) -> RawSample {
        RawSample {
            user_id: "u".into(),
            index: history.len(),
            history: history
                .iter()
                .enumerate()
                .map(|(k, &(t, l))| HistoryEntry {
                    item_id: format!("h{k}"),
                    title: t.into(),
                    label: Label::from(l),
                    timestamp: k as i64,
                })
                .collect(),
            target_item_id: "x".into(),
            target_title: target.into(),
            label: Label::from(label),
            timestamp: 100,
        }
    }

    #[test]
    fn tokens_and_overlap() {
        assert_eq!(title_tokens("Amber 17, amber!"), vec!["17".to_string(), "amber".to_string()]);
        let a = title_tokens("Amber 1");
        let b = title_tokens("Amber 2");
        assert!((jaccard(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(jaccard(&a, &title_tokens("Birch 3")), 0.0);
        assert_eq!(jaccard(&[], &[]), 0.0);
    }

    #[test]
    fn shot_similarity_signs() {
        let q = raw("Amber 1", true, &[]);
        let yes = raw("Amber 2", true, &[]);
        let no = raw("Amber 3", false, &[]);
        let other = raw("Birch 4", false, &[]);
        assert_eq!(shot_similarity(&q, &[&yes]), 1.0);
        assert_eq!(shot_similarity(&q, &[&no, &other]), -1.0);
        assert_eq!(shot_similarity(&q, &[&yes, &no]), 0.0);
        assert_eq!(shot_similarity(&q, &[&other]), 0.0);
        assert_eq!(shot_similarity(&q, &[]), 0.0);
    }

    #[test]
    fn plain_mode_ignores_shots() {
        let q = raw("Amber 1", true, &[("Amber 5", true), ("Birch 6", false)]);
        let s1 = raw("Amber 2", true, &[]);
        let s2 = raw("Birch 3", false, &[]);
        let spec = FeatureSpec { mode: FeatureMode::Plain, memory_buckets: 8 };
        let a = featurize_parts(&q, &[&s1, &s2], &spec);
        let b = featurize_parts(&q, &[], &spec);
        assert_eq!(a, b);
        assert_eq!(a.get(1), 0.0);
        assert_eq!(a.get(3), 0.0); // one of two history items liked
        assert!((a.get(4) - (1.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        for &z in &[-12.0, -2.0, 0.0, 0.7, 12.0] {
            let p: f64 = sigmoid(z);
            assert!((cross_entropy(z, true) + p.ln()).abs() < 1e-9);
            assert!((cross_entropy(z, false) + (1.0 - p).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(train_on_features(&[], &ToyScorerParams::default()).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let spec = FeatureSpec { mode: FeatureMode::IclFormat, memory_buckets: 0 };
        let mut f = SparseFeatures::default();
        f.push(0, 1.0);
        let params = ToyScorerParams {
            memory_buckets: spec.memory_buckets,
            optimizer: Optimizer::GradientDescent,
            learning_rate: f64::INFINITY,
            epochs: 3,
            ..ToyScorerParams::default()
        };
        let err = train_on_features(&[(f.clone(), true), (f, false)], &params).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }));
    }
}
