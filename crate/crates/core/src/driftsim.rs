//! Synthetic interaction streams with controllable user-interest drift.
//!
//! Each user holds a unit preference vector over item clusters. Between
//! periods the vector takes a spherical random-walk step of relative size
//! `drift_rate`, or with probability `regime_switch_prob` is replaced by a
//! fresh random direction. An event on an item of cluster `c` is labeled
//! positive with probability `sigmoid(pref[c] / noise_temp)`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::derive_seed;
use crate::ingest::{Catalog, Interaction, Label, Provenance};
use crate::metrics::auc;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub periods: usize,
    pub events_per_user_per_period: usize,
    pub drift_rate: f64,
    pub regime_switch_prob: f64,
    pub noise_temp: f64,
    pub seed: u64,
    pub start_timestamp: i64,
    pub period_seconds: i64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            n_users: 2000,
            n_items: 400,
            n_clusters: 4,
            periods: 10,
            events_per_user_per_period: 6,
            drift_rate: 0.3,
            regime_switch_prob: 0.1,
            noise_temp: 0.15,
            seed: 0,
            start_timestamp: 1_500_000_000,
            period_seconds: 30 * 86_400,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("n_clusters", self.n_clusters),
            ("periods", self.periods),
            ("events_per_user_per_period", self.events_per_user_per_period),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        if self.n_items < self.n_clusters {
            return Err(Error::Invalid("need at least one item per cluster".into()));
        }
        for (name, v) in [("drift_rate", self.drift_rate), ("regime_switch_prob", self.regime_switch_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.noise_temp > 0.0) {
            return Err(Error::Invalid("noise_temp must be positive".into()));
        }
        if self.start_timestamp <= 0 {
            return Err(Error::Invalid("start_timestamp must be positive".into()));
        }
        if self.period_seconds < self.events_per_user_per_period as i64 {
            return Err(Error::Invalid(
                "period_seconds must allow distinct timestamps per user".into(),
            ));
        }
        Ok(())
    }
}

const CLUSTER_WORDS: [&str; 16] = [
    "Amber", "Birch", "Cobalt", "Dune", "Ember", "Fjord", "Granite", "Harbor", "Indigo",
    "Juniper", "Kestrel", "Lagoon", "Meadow", "Nimbus", "Onyx", "Prairie",
];

/// Title word shared by every item of a cluster.
pub fn cluster_word(c: usize) -> String {
    let base = CLUSTER_WORDS[c % CLUSTER_WORDS.len()];
    match c / CLUSTER_WORDS.len() {
        0 => base.to_string(),
        k => format!("{base}{k}"),
    }
}

pub fn item_id(i: usize) -> String {
    format!("i{i:05}")
}

pub fn user_id(u: usize) -> String {
    format!("u{u:05}")
}

/// Simulator state behind a generated catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub config: DriftConfig,
    /// `preferences[user][period]`, unit norm, length `n_clusters`.
    pub preferences: Vec<Vec<Vec<f64>>>,
    pub item_clusters: Vec<usize>,
    pub catalog: Catalog,
    /// True positive probability of each catalog interaction (same order).
    pub event_probabilities: Vec<f64>,
    /// Simulator period of each catalog interaction (same order).
    pub event_periods: Vec<usize>,
}

/// JSON sidecar written next to a simulated catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSidecar {
    pub config: DriftConfig,
    pub preferences: Vec<Vec<Vec<f64>>>,
    pub item_clusters: Vec<usize>,
    pub event_probabilities: Vec<f64>,
    pub event_periods: Vec<usize>,
}

impl GroundTruth {
    pub fn sidecar(&self) -> GroundTruthSidecar {
        GroundTruthSidecar {
            config: self.config.clone(),
            preferences: self.preferences.clone(),
            item_clusters: self.item_clusters.clone(),
            event_probabilities: self.event_probabilities.clone(),
            event_periods: self.event_periods.clone(),
        }
    }

    pub fn true_probability(&self, user: usize, item: usize, period: usize) -> f64 {
        let c = self.item_clusters[item];
        sigmoid(self.preferences[user][period][c] / self.config.noise_temp)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        // degenerate draw; fall back to the first axis
        v.iter_mut().enumerate().for_each(|(i, x)| *x = if i == 0 { 1.0 } else { 0.0 });
    }
}

fn random_direction(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut v);
    v
}

/// Preference trajectory for one user across all periods.
fn preference_path(cfg: &DriftConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let k = cfg.n_clusters;
    let step_scale = cfg.drift_rate / (k as f64).sqrt();
    let mut path = Vec::with_capacity(cfg.periods);
    let mut pref = random_direction(rng, k);
    for t in 0..cfg.periods {
        if t > 0 {
            if rng.random::<f64>() < cfg.regime_switch_prob {
                pref = random_direction(rng, k);
            } else if step_scale > 0.0 {
                for x in pref.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *x += step_scale * z;
                }
                normalize(&mut pref);
            }
        }
        path.push(pref.clone());
    }
    path
}

struct Event {
    interaction: Interaction,
    probability: f64,
    period: usize,
}

pub fn generate(cfg: &DriftConfig) -> Result<GroundTruth> {
    cfg.validate()?;
    let item_clusters: Vec<usize> = (0..cfg.n_items).map(|i| i % cfg.n_clusters).collect();
    let titles: Vec<String> = (0..cfg.n_items)
        .map(|i| format!("{} {}", cluster_word(item_clusters[i]), i))
        .collect();

    let per_user: Vec<(Vec<Vec<f64>>, Vec<Event>)> = (0..cfg.n_users)
        .into_par_iter()
        .map(|u| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &user_id(u)));
            let path = preference_path(cfg, &mut rng);
            let mut events = Vec::with_capacity(cfg.periods * cfg.events_per_user_per_period);
            for (t, pref) in path.iter().enumerate() {
                let mut offsets =
                    sample(&mut rng, cfg.period_seconds as usize, cfg.events_per_user_per_period)
                        .into_vec();
                offsets.sort_unstable();
                for off in offsets {
                    let item = rng.random_range(0..cfg.n_items);
                    let p = sigmoid(pref[item_clusters[item]] / cfg.noise_temp);
                    let yes = rng.random::<f64>() < p;
                    let rating = if yes { 5.0 } else { f64::from(rng.random_range(1..=4u8)) };
                    events.push(Event {
                        interaction: Interaction {
                            user_id: user_id(u),
                            item_id: item_id(item),
                            item_title: titles[item].clone(),
                            rating,
                            timestamp: cfg.start_timestamp
                                + t as i64 * cfg.period_seconds
                                + off as i64,
                            label: Some(Label::from(yes)),
                        },
                        probability: p,
                        period: t,
                    });
                }
            }
            (path, events)
        })
        .collect();

    let mut preferences = Vec::with_capacity(cfg.n_users);
    let mut events = Vec::with_capacity(cfg.n_users * cfg.periods * cfg.events_per_user_per_period);
    for (path, ev) in per_user {
        preferences.push(path);
        events.extend(ev);
    }
    events.sort_by(|a, b| a.interaction.sort_key().cmp(&b.interaction.sort_key()));
    let event_probabilities = events.iter().map(|e| e.probability).collect();
    let event_periods = events.iter().map(|e| e.period).collect();
    let interactions: Vec<Interaction> = events.into_iter().map(|e| e.interaction).collect();
    let n = interactions.len();
    let provenance = Provenance {
        source: Some(format!("driftsim seed={}", cfg.seed)),
        threshold: Some(crate::ingest::DEFAULT_THRESHOLD),
        rule: Some(crate::ingest::ThresholdRule::StrictGreater),
        min_interactions: 1,
        interactions_in: n,
        interactions_out: n,
        ..Provenance::default()
    };
    Ok(GroundTruth {
        config: cfg.clone(),
        preferences,
        item_clusters,
        catalog: Catalog::new(interactions, provenance),
        event_probabilities,
        event_periods,
    })
}

/// AUC of the true-probability scorer on one simulator period.
pub fn bayes_auc(gt: &GroundTruth, period: usize) -> Result<f64> {
    if period >= gt.config.periods {
        return Err(Error::OutOfRange(format!(
            "period {period} of {}",
            gt.config.periods
        )));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for ((it, &p), &t) in gt
        .catalog
        .interactions
        .iter()
        .zip(&gt.event_probabilities)
        .zip(&gt.event_periods)
    {
        if t == period {
            scores.push(p);
            labels.push(it.require_label()?.is_yes());
        }
    }
    auc(&scores, &labels)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean cosine similarity between each user's first- and last-period
/// preference vectors.
pub fn mean_endpoint_similarity(gt: &GroundTruth) -> f64 {
    let sims: Vec<f64> = gt
        .preferences
        .iter()
        .map(|path| cosine(&path[0], path.last().expect("at least one period")))
        .collect();
    sims.iter().sum::<f64>() / sims.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DriftConfig {
        DriftConfig {
            n_users: 50,
            n_items: 40,
            events_per_user_per_period: 4,
            ..DriftConfig::default()
        }
    }

    #[test]
    fn no_drift_keeps_preferences() {
        let cfg = DriftConfig {
            drift_rate: 0.0,
            regime_switch_prob: 0.0,
            ..small()
        };
        let gt = generate(&cfg).unwrap();
        for path in &gt.preferences {
            assert_eq!(path[0], path[9]);
        }
    }

    #[test]
    fn preferences_unit_norm_and_timestamps_increase() {
        let gt = generate(&small()).unwrap();
        for path in &gt.preferences {
            for v in path {
                let n: f64 = v.iter().map(|x| x * x).sum();
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
        let mut last: std::collections::HashMap<&str, i64> = Default::default();
        for it in &gt.catalog.interactions {
            if let Some(&prev) = last.get(it.user_id.as_str()) {
                assert!(it.timestamp > prev);
            }
            last.insert(&it.user_id, it.timestamp);
        }
    }

    #[test]
    fn noiseless_bayes_auc_is_one() {
        let cfg = DriftConfig {
            drift_rate: 0.0,
            regime_switch_prob: 0.0,
            noise_temp: 1e-9,
            ..small()
        };
        let gt = generate(&cfg).unwrap();
        assert_eq!(bayes_auc(&gt, 0).unwrap(), 1.0);
    }

    #[test]
    fn invalid_configs() {
        assert!(generate(&DriftConfig { n_users: 0, ..small() }).is_err());
        assert!(generate(&DriftConfig { drift_rate: 1.5, ..small() }).is_err());
        assert!(generate(&DriftConfig { noise_temp: 0.0, ..small() }).is_err());
        let gt = generate(&small()).unwrap();
        assert!(bayes_auc(&gt, 10).is_err());
    }

    #[test]
    fn titles_carry_cluster_word() {
        let gt = generate(&small()).unwrap();
        for it in gt.catalog.interactions.iter().take(50) {
            let idx: usize = it.item_id[1..].parse().unwrap();
            assert!(it.item_title.starts_with(&cluster_word(gt.item_clusters[idx])));
        }
        assert_eq!(cluster_word(17), "Birch1");
    }
}
