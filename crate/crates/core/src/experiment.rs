//! End-to-end drift experiments on simulator output with the toy scorer.
//!
//! Samples are taken from each user's full chronological stream, shots are
//! picked by the same selection rule as [`crate::icl`], and features are
//! computed directly from the structured samples (no text rendering), so
//! results agree with scoring assembled [`IclInstance`](crate::icl::IclInstance)s.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::derive_seed;
use crate::driftsim::{generate, DriftConfig, GroundTruth};
use crate::icl::{select_shot_positions, IclConfig, ShotOrder};
use crate::metrics::{auc, group_auc, pdm, pdt, GroupAuc, Grouping, ScoredExample};
use crate::prompt::{build_user_sequences, RawSample, DEFAULT_MAX_HISTORY};
use crate::scorer::toy::{featurize_parts, train_on_features, Example, FeatureMode, FeatureSpec, SparseFeatures, ToyModel, ToyScorerParams};
use crate::temporal::{partition, PartitionMode, PeriodedDataset};
use crate::{Error, Result};

/// Simulated world: catalog, periods and every user's sample sequence.
#[derive(Debug, Clone)]
pub struct World {
    pub truth: GroundTruth,
    pub periods: PeriodedDataset,
    pub sequences: BTreeMap<String, Vec<RawSample>>,
    /// `(user, position)` of every sample, grouped by period.
    pub by_period: Vec<Vec<(String, usize)>>,
}

impl World {
    pub fn build(sim: &DriftConfig, max_history: usize) -> Result<Self> {
        let truth = generate(sim)?;
        let periods = partition(&truth.catalog, sim.periods, PartitionMode::EqualCount)?;
        let sequences = build_user_sequences(&truth.catalog.interactions, max_history)?;
        let mut by_period = vec![Vec::new(); periods.num_periods()];
        for (user, seq) in &sequences {
            for (pos, s) in seq.iter().enumerate() {
                by_period[periods.period_of(s.timestamp)].push((user.clone(), pos));
            }
        }
        Ok(World {
            truth,
            periods,
            sequences,
            by_period,
        })
    }

    pub fn sample(&self, user: &str, pos: usize) -> &RawSample {
        &self.sequences[user][pos]
    }

    /// Features of one sample with shots drawn from the same user's earlier samples.
    pub fn features(&self, user: &str, pos: usize, icl: &IclConfig, spec: &FeatureSpec) -> SparseFeatures {
        let seq = &self.sequences[user];
        let query = &seq[pos];
        let eligible = seq[..pos].partition_point(|s| s.timestamp < query.timestamp);
        let mut positions = select_shot_positions(eligible, user, query.index, icl);
        if icl.shot_order == ShotOrder::Reverse {
            positions.reverse();
        }
        let shots: Vec<&RawSample> = positions.iter().map(|&p| &seq[p]).collect();
        featurize_parts(query, &shots, spec)
    }

    /// Every sample in periods `0..=end` whose user is not excluded.
    pub fn training_keys(&self, end: usize, exclude: &HashSet<String>) -> Vec<(String, usize)> {
        self.by_period[..=end]
            .iter()
            .flatten()
            .filter(|(u, _)| !exclude.contains(u))
            .cloned()
            .collect()
    }

    /// `n` samples drawn without replacement from `period` (all, if fewer).
    pub fn test_keys(&self, period: usize, n: usize, seed: u64) -> Vec<(String, usize)> {
        let pool = &self.by_period[period];
        let k = n.min(pool.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, pool.len(), k).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i].clone()).collect()
    }

    pub fn examples(&self, keys: &[(String, usize)], icl: &IclConfig, spec: &FeatureSpec) -> Vec<Example> {
        keys.par_iter()
            .map(|(u, p)| (self.features(u, *p, icl, spec), self.sample(u, *p).label.is_yes()))
            .collect()
    }

    pub fn train(
        &self,
        end: usize,
        exclude: &HashSet<String>,
        icl: &IclConfig,
        params: &ToyScorerParams,
    ) -> Result<ToyModel> {
        let keys = self.training_keys(end, exclude);
        let examples = self.examples(&keys, icl, &params.spec());
        Ok(train_on_features(&examples, params)?.model)
    }

    pub fn score(&self, model: &ToyModel, keys: &[(String, usize)], icl: &IclConfig) -> Vec<ScoredExample> {
        keys.par_iter()
            .map(|(u, p)| {
                let s = self.sample(u, *p);
                ScoredExample {
                    user_id: u.clone(),
                    timestamp: s.timestamp,
                    p_yes: model.predict_features(&self.features(u, *p, icl, &model.spec)),
                    label: s.label.is_yes(),
                }
            })
            .collect()
    }
}

pub fn examples_auc(examples: &[ScoredExample]) -> Result<f64> {
    let scores: Vec<f64> = examples.iter().map(|e| e.p_yes).collect();
    let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
    auc(&scores, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub sim: DriftConfig,
    pub max_history: usize,
    pub num_shots: usize,
    pub early_end: usize,
    pub late_end: usize,
    pub early_test: usize,
    pub late_test: usize,
    pub test_size: usize,
    pub toy: ToyScorerParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            sim: DriftConfig::default(),
            max_history: DEFAULT_MAX_HISTORY,
            num_shots: 4,
            early_end: 4,
            late_end: 8,
            early_test: 5,
            late_test: 9,
            test_size: 5000,
            toy: ToyScorerParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.sim.seed = seed;
        cfg.toy.seed = derive_seed(seed, "toy");
        cfg
    }

    fn params(&self, mode: FeatureMode) -> ToyScorerParams {
        ToyScorerParams {
            mode,
            ..self.toy.clone()
        }
    }

    fn test_seed(&self, period: usize) -> u64 {
        derive_seed(self.sim.seed, &format!("test-{period}"))
    }

    fn validate(&self) -> Result<()> {
        let p = self.sim.periods;
        if self.early_end >= self.late_end || self.late_end >= self.late_test || self.late_test >= p {
            return Err(Error::OutOfRange(format!(
                "snapshots ({}, {}) and test period {} with {p} periods",
                self.early_end, self.late_end, self.late_test
            )));
        }
        if self.early_test <= self.early_end || self.early_test >= p {
            return Err(Error::OutOfRange(format!(
                "early test period {} with stale snapshot ending at {}",
                self.early_test, self.early_end
            )));
        }
        Ok(())
    }
}

/// AUCs of one feature mode's stale and updated snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotAucs {
    pub stale_early: f64,
    pub stale_late: f64,
    pub updated_late: f64,
}

impl SnapshotAucs {
    pub fn pdt(&self) -> f64 {
        pdt(self.stale_early, self.stale_late)
    }

    pub fn pdm(&self) -> f64 {
        pdm(self.updated_late, self.stale_late)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftOutcome {
    pub plain: SnapshotAucs,
    pub icl: SnapshotAucs,
}

impl DriftOutcome {
    /// ICL gain over plain for the stale snapshot on the late period.
    pub fn delta_auc(&self) -> f64 {
        self.icl.stale_late - self.plain.stale_late
    }
}

fn snapshot_aucs(world: &World, cfg: &ExperimentConfig, mode: FeatureMode, icl: &IclConfig) -> Result<SnapshotAucs> {
    let none = HashSet::new();
    let params = cfg.params(mode);
    let early_keys = world.test_keys(cfg.early_test, cfg.test_size, cfg.test_seed(cfg.early_test));
    let late_keys = world.test_keys(cfg.late_test, cfg.test_size, cfg.test_seed(cfg.late_test));
    let stale = world.train(cfg.early_end, &none, icl, &params)?;
    let updated = world.train(cfg.late_end, &none, icl, &params)?;
    Ok(SnapshotAucs {
        stale_early: examples_auc(&world.score(&stale, &early_keys, icl))?,
        stale_late: examples_auc(&world.score(&stale, &late_keys, icl))?,
        updated_late: examples_auc(&world.score(&updated, &late_keys, icl))?,
    })
}

/// Stale/updated snapshots for the plain scorer (no shots) and the ICL
/// scorer (`num_shots` recent shots).
pub fn run_drift(world: &World, cfg: &ExperimentConfig) -> Result<DriftOutcome> {
    cfg.validate()?;
    Ok(DriftOutcome {
        plain: snapshot_aucs(world, cfg, FeatureMode::Plain, &IclConfig::recent(0))?,
        icl: snapshot_aucs(world, cfg, FeatureMode::IclFormat, &IclConfig::recent(cfg.num_shots))?,
    })
}

/// Late-period predictions of a stale ICL-format scorer trained and tested
/// with `icl`.
pub fn stale_predictions(world: &World, cfg: &ExperimentConfig, icl: &IclConfig) -> Result<Vec<ScoredExample>> {
    cfg.validate()?;
    icl.validate()?;
    let model = world.train(cfg.early_end, &HashSet::new(), icl, &cfg.params(FeatureMode::IclFormat))?;
    let keys = world.test_keys(cfg.late_test, cfg.test_size, cfg.test_seed(cfg.late_test));
    Ok(world.score(&model, &keys, icl))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub num_shots: usize,
    pub auc: f64,
    /// Bootstrap standard error over test predictions.
    pub se: f64,
}

pub fn shot_sweep(world: &World, cfg: &ExperimentConfig, shots: &[usize], resamples: usize) -> Result<Vec<SweepPoint>> {
    shots
        .iter()
        .map(|&m| {
            let preds = stale_predictions(world, cfg, &IclConfig::recent(m))?;
            let seed = derive_seed(cfg.sim.seed, &format!("sweep-se-{m}"));
            Ok(SweepPoint {
                num_shots: m,
                auc: examples_auc(&preds)?,
                se: bootstrap_auc_se(&preds, resamples, seed)?,
            })
        })
        .collect()
}

/// Users held out of training, chosen with a seeded shuffle.
pub fn holdout_users(world: &World, fraction: f64, seed: u64) -> HashSet<String> {
    let users: Vec<&String> = world.sequences.keys().collect();
    let k = ((users.len() as f64) * fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample(&mut rng, users.len(), k.min(users.len()))
        .into_iter()
        .map(|i| users[i].clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeenUnseenOutcome {
    pub n_scored: usize,
    pub plain: BTreeMap<String, GroupAuc>,
    pub icl: BTreeMap<String, GroupAuc>,
}

impl SeenUnseenOutcome {
    /// ICL AUC minus plain AUC for a group, if both are defined.
    pub fn delta(&self, group: &str) -> Option<f64> {
        Some(self.icl.get(group)?.auc? - self.plain.get(group)?.auc?)
    }
}

/// Trains stale plain and ICL scorers without the held-out users and
/// reports late-period AUC for seen and unseen users.
pub fn seen_unseen(world: &World, cfg: &ExperimentConfig, holdout_fraction: f64) -> Result<SeenUnseenOutcome> {
    cfg.validate()?;
    let held = holdout_users(world, holdout_fraction, derive_seed(cfg.sim.seed, "holdout"));
    let keys = world.test_keys(cfg.late_test, cfg.test_size, cfg.test_seed(cfg.late_test));
    let train_keys = world.training_keys(cfg.early_end, &held);
    let seen: HashSet<String> = train_keys.iter().map(|(u, _)| u.clone()).collect();
    let grouping = Grouping::SeenUnseen(&seen);

    let run = |mode: FeatureMode, icl: IclConfig| -> Result<Vec<ScoredExample>> {
        let model = world.train(cfg.early_end, &held, &icl, &cfg.params(mode))?;
        Ok(world.score(&model, &keys, &icl))
    };
    let plain = run(FeatureMode::Plain, IclConfig::recent(0))?;
    let icl = run(FeatureMode::IclFormat, IclConfig::recent(cfg.num_shots))?;
    Ok(SeenUnseenOutcome {
        n_scored: keys.len(),
        plain: group_auc(&plain, &grouping),
        icl: group_auc(&icl, &grouping),
    })
}

/// Lower end of a two-sided percentile bootstrap interval for the mean.
pub fn bootstrap_mean_lower(values: &[f64], confidence: f64, resamples: usize, seed: u64) -> Result<f64> {
    if values.is_empty() || resamples == 0 {
        return Err(Error::Undefined("bootstrap over no values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - confidence) / 2.0;
    let idx = ((alpha * resamples as f64).floor() as usize).min(resamples - 1);
    Ok(means[idx])
}

/// Standard deviation of the AUC over bootstrap resamples of the predictions.
pub fn bootstrap_auc_se(examples: &[ScoredExample], resamples: usize, seed: u64) -> Result<f64> {
    if examples.is_empty() || resamples < 2 {
        return Err(Error::Undefined("bootstrap over no predictions".into()));
    }
    let n = examples.len();
    let aucs: Vec<f64> = (0..resamples)
        .into_par_iter()
        .filter_map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &r.to_string()));
            let (scores, labels): (Vec<f64>, Vec<bool>) = (0..n)
                .map(|_| {
                    let e = &examples[rng.random_range(0..n)];
                    (e.p_yes, e.label)
                })
                .unzip();
            auc(&scores, &labels).ok()
        })
        .collect();
    if aucs.len() < 2 {
        return Err(Error::Undefined("bootstrap resamples were single-class".into()));
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    let var = aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (aucs.len() - 1) as f64;
    Ok(var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bootstrap_lower_of_constant() {
        let lo = bootstrap_mean_lower(&[0.2; 5], 0.95, 1000, 1).unwrap();
        assert!((lo - 0.2).abs() < 1e-12);
        assert!(bootstrap_mean_lower(&[], 0.95, 10, 1).is_err());
    }

    #[test]
    fn bootstrap_lower_below_mean() {
        let v = [0.1, -0.05, 0.3, 0.2, 0.0];
        let lo = bootstrap_mean_lower(&v, 0.95, 5000, 3).unwrap();
        assert!(lo < 0.11 && lo >= -0.05);
    }

    #[test]
    fn config_ordering_checked() {
        let mut cfg = ExperimentConfig::default();
        cfg.late_end = 9;
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::default().validate().is_ok());
    }
}
