//! Chronological period partitioning, train/val/test carving and the
//! cumulative snapshot corpora behind the drift metrics.

use std::ops::Range;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{Catalog, Interaction};
use crate::{Error, Result};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    #[default]
    EqualCount,
    EqualTimespan,
}

/// Interactions split into consecutive periods `D_0 .. D_{P-1}`.
///
/// `boundaries[t]` is the first timestamp belonging to period `t + 1`; every
/// interaction in period `t` is strictly earlier than every later boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodedDataset {
    pub periods: Vec<Vec<Interaction>>,
    pub boundaries: Vec<i64>,
    pub mode: PartitionMode,
}

impl PeriodedDataset {
    pub fn num_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.periods.iter().map(Vec::len).collect()
    }

    /// Period index an arbitrary timestamp falls into.
    pub fn period_of(&self, timestamp: i64) -> usize {
        self.boundaries.partition_point(|&b| b <= timestamp)
    }

    /// Cumulative union of periods `0..=end`, in chronological order.
    pub fn cumulative(&self, end: usize) -> Vec<Interaction> {
        self.periods[..=end].iter().flatten().cloned().collect()
    }
}

/// Splits a sorted catalog into `p` chronological periods.
///
/// Under `EqualCount` each cut targets an even share of what remains; a cut
/// that would split a group of identical timestamps moves forward past the
/// group (or back to its start when moving forward would leave too few
/// distinct timestamps for the remaining periods).
pub fn partition(catalog: &Catalog, p: usize, mode: PartitionMode) -> Result<PeriodedDataset> {
    partition_interactions(&catalog.interactions, p, mode)
}

pub fn partition_interactions(
    interactions: &[Interaction],
    p: usize,
    mode: PartitionMode,
) -> Result<PeriodedDataset> {
    let n = interactions.len();
    if p < 2 {
        return Err(Error::Invalid(format!("need at least 2 periods, got {p}")));
    }
    if p > n {
        return Err(Error::SizeExceeded {
            what: "periods vs interactions".into(),
            requested: p,
            available: n,
        });
    }
    if interactions
        .windows(2)
        .any(|w| w[0].sort_key() > w[1].sort_key())
    {
        return Err(Error::Invalid("catalog is not chronologically sorted".into()));
    }
    let cuts = match mode {
        PartitionMode::EqualCount => equal_count_cuts(interactions, p)?,
        PartitionMode::EqualTimespan => equal_timespan_cuts(interactions, p),
    };

    let mut periods = Vec::with_capacity(p);
    let mut boundaries = Vec::with_capacity(p - 1);
    let mut start = 0;
    for (t, &cut) in cuts.iter().enumerate() {
        periods.push(interactions[start..cut].to_vec());
        start = cut;
        if t + 1 < p {
            boundaries.push(boundary_after(interactions, cut));
        }
    }
    Ok(PeriodedDataset {
        periods,
        boundaries,
        mode,
    })
}

fn boundary_after(interactions: &[Interaction], cut: usize) -> i64 {
    match interactions.get(cut) {
        Some(it) => it.timestamp,
        // Empty trailing period: anything after the last event.
        None => interactions.last().map_or(0, |it| it.timestamp + 1),
    }
}

/// Returns the end index (exclusive) of every period.
fn equal_count_cuts(interactions: &[Interaction], p: usize) -> Result<Vec<usize>> {
    let n = interactions.len();
    // starts of each run of identical timestamps, plus n
    let mut group_starts: Vec<usize> = (0..n)
        .filter(|&i| i == 0 || interactions[i].timestamp != interactions[i - 1].timestamp)
        .collect();
    let distinct = group_starts.len();
    if p > distinct {
        return Err(Error::SizeExceeded {
            what: "periods vs distinct timestamps".into(),
            requested: p,
            available: distinct,
        });
    }
    group_starts.push(n);

    let mut cuts = Vec::with_capacity(p);
    let mut start_group = 0usize; // index into group_starts
    for t in 0..p {
        let periods_left = p - t;
        if periods_left == 1 {
            cuts.push(n);
            break;
        }
        let start = group_starts[start_group];
        let remaining = n - start;
        let target = start + remaining.div_ceil(periods_left);
        // Valid cut positions are group starts; this period needs at least one
        // group and every later period needs at least one group too.
        let min_g = start_group + 1;
        let max_g = distinct - (periods_left - 1);
        let forward = group_starts.partition_point(|&s| s < target);
        let g = if forward <= max_g {
            forward.max(min_g)
        } else {
            let backward = group_starts.partition_point(|&s| s <= target) - 1;
            backward.clamp(min_g, max_g)
        };
        cuts.push(group_starts[g]);
        start_group = g;
    }
    Ok(cuts)
}

fn equal_timespan_cuts(interactions: &[Interaction], p: usize) -> Vec<usize> {
    let lo = interactions.first().map_or(0, |i| i.timestamp) as i128;
    let hi = interactions.last().map_or(0, |i| i.timestamp) as i128 + 1;
    let span = hi - lo;
    (1..=p)
        .map(|t| {
            if t == p {
                interactions.len()
            } else {
                let b = (lo + span * t as i128 / p as i128) as i64;
                interactions.partition_point(|i| i.timestamp < b)
            }
        })
        .collect()
}

/// Which periods train, how much to carve for validation and test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_periods: Range<usize>,
    /// Chronological tail of the last training period held out for validation.
    pub val_size: usize,
    pub test_period: usize,
    /// Uniform sample (without replacement) drawn from the test period.
    pub test_size: usize,
    pub seed: u64,
}

impl SplitPlan {
    /// Train on `D_0..D_4`, validate on the last 5,000 samples of `D_4`,
    /// test on 5,000 samples drawn from `D_9`.
    pub fn default_with_seed(seed: u64) -> Self {
        SplitPlan {
            train_periods: 0..5,
            val_size: 5000,
            test_period: 9,
            test_size: 5000,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Interaction>,
    pub val: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

pub fn make_split(pd: &PeriodedDataset, plan: &SplitPlan) -> Result<Split> {
    let p = pd.num_periods();
    let tp = &plan.train_periods;
    if tp.is_empty() || tp.end > p {
        return Err(Error::OutOfRange(format!(
            "train periods {tp:?} with {p} periods"
        )));
    }
    if plan.test_period >= p {
        return Err(Error::OutOfRange(format!(
            "test period {} with {p} periods",
            plan.test_period
        )));
    }
    if plan.test_period < tp.end {
        return Err(Error::Leakage(format!(
            "test period {} does not follow training periods {tp:?}",
            plan.test_period
        )));
    }
    let last = &pd.periods[tp.end - 1];
    if plan.val_size > last.len() {
        return Err(Error::SizeExceeded {
            what: format!("validation carve from period {}", tp.end - 1),
            requested: plan.val_size,
            available: last.len(),
        });
    }
    let test_pool = &pd.periods[plan.test_period];
    if plan.test_size > test_pool.len() {
        return Err(Error::SizeExceeded {
            what: format!("test sample from period {}", plan.test_period),
            requested: plan.test_size,
            available: test_pool.len(),
        });
    }

    let mut train: Vec<Interaction> = pd.periods[tp.start..tp.end - 1]
        .iter()
        .flatten()
        .cloned()
        .collect();
    let keep = last.len() - plan.val_size;
    train.extend_from_slice(&last[..keep]);
    let val = last[keep..].to_vec();

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut picked = sample(&mut rng, test_pool.len(), plan.test_size).into_vec();
    picked.sort_unstable();
    let test: Vec<Interaction> = picked.into_iter().map(|i| test_pool[i].clone()).collect();

    check_no_leakage(&train, &pd.periods[plan.test_period])?;
    Ok(Split { train, val, test })
}

/// Fails unless every training timestamp precedes every test timestamp.
pub fn check_no_leakage(train: &[Interaction], test: &[Interaction]) -> Result<()> {
    let max_train = train.iter().map(|i| i.timestamp).max();
    let min_test = test.iter().map(|i| i.timestamp).min();
    if let (Some(a), Some(b)) = (max_train, min_test) {
        if a >= b {
            return Err(Error::Leakage(format!(
                "max training timestamp {a} >= min test timestamp {b}"
            )));
        }
    }
    Ok(())
}

/// Cumulative training corpora `D_0..=early_end` and `D_0..=late_end` for a
/// stale and an updated model snapshot. With `guard_test_period` set, the
/// late corpus must end strictly before that period.
pub fn snapshot_pair(
    pd: &PeriodedDataset,
    early_end: usize,
    late_end: usize,
    guard_test_period: Option<usize>,
) -> Result<(Vec<Interaction>, Vec<Interaction>)> {
    let p = pd.num_periods();
    if early_end >= late_end || late_end >= p {
        return Err(Error::OutOfRange(format!(
            "snapshot ends ({early_end}, {late_end}) with {p} periods"
        )));
    }
    let early = pd.cumulative(early_end);
    let late = pd.cumulative(late_end);
    if let Some(tp) = guard_test_period {
        if tp >= p {
            return Err(Error::OutOfRange(format!("test period {tp} with {p} periods")));
        }
        check_no_leakage(&late, &pd.periods[tp])?;
    }
    Ok((early, late))
}

/// Contents of `split.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub partition_mode: PartitionMode,
    pub num_periods: usize,
    pub boundaries: Vec<i64>,
    pub period_sizes: Vec<usize>,
    pub plan: SplitPlan,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
}

impl SplitManifest {
    pub fn new(pd: &PeriodedDataset, plan: &SplitPlan, split: &Split) -> Self {
        SplitManifest {
            partition_mode: pd.mode,
            num_periods: pd.num_periods(),
            boundaries: pd.boundaries.clone(),
            period_sizes: pd.sizes(),
            plan: plan.clone(),
            train_count: split.train.len(),
            val_count: split.val.len(),
            test_count: split.test.len(),
        }
    }
}
