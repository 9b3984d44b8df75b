mod common;

use common::{ev, user_stream};
use proptest::prelude::*;
use recicl::driftsim::{generate, DriftConfig};
use recicl::ingest::Interaction;
use recicl::temporal::*;
use recicl::Error;

fn events(ts: &[i64]) -> Vec<Interaction> {
    ts.iter()
        .enumerate()
        .map(|(k, &t)| ev(&format!("u{k}"), "i", t, 5.0))
        .collect()
}

/// Every split of `ts` into `p` non-empty runs whose cuts fall between
/// distinct timestamps.
fn valid_cut_sets(ts: &[i64], p: usize) -> Vec<Vec<usize>> {
    let candidates: Vec<usize> = (1..ts.len()).filter(|&i| ts[i - 1] != ts[i]).collect();
    let mut out = Vec::new();
    let mut stack = vec![(Vec::new(), 0usize)];
    while let Some((cuts, from)) = stack.pop() {
        if cuts.len() == p - 1 {
            out.push(cuts);
            continue;
        }
        for (k, &c) in candidates.iter().enumerate().skip(from) {
            let mut next: Vec<usize> = cuts.clone();
            next.push(c);
            stack.push((next, k + 1));
        }
    }
    out
}

fn cuts_of(pd: &PeriodedDataset) -> Vec<usize> {
    pd.sizes()
        .iter()
        .scan(0, |acc, s| {
            *acc += s;
            Some(*acc)
        })
        .take(pd.num_periods() - 1)
        .collect()
}

#[test]
fn tie_fixture_against_enumerated_boundaries() {
    let ts = [1, 2, 2, 2, 3, 4, 5, 5, 6, 7];
    let pd = partition_interactions(&events(&ts), 3, PartitionMode::EqualCount).unwrap();
    let cuts = cuts_of(&pd);
    assert!(valid_cut_sets(&ts, 3).contains(&cuts));
    // target cuts at 4 and 7; the second falls inside the pair of 5s and moves past it
    assert_eq!(pd.sizes(), vec![4, 4, 2]);
    assert_eq!(pd.boundaries, vec![3, 6]);
}

#[test]
fn all_identical_timestamps_cannot_be_split() {
    let err = partition_interactions(&events(&[5; 10]), 2, PartitionMode::EqualCount).unwrap_err();
    assert!(matches!(err, Error::SizeExceeded { requested: 2, available: 1, .. }));
}

#[test]
fn equal_timespan_uses_calendar_width() {
    let pd = partition_interactions(&events(&[0, 1, 2, 3, 10, 20, 30, 40, 99, 100]), 2, PartitionMode::EqualTimespan)
        .unwrap();
    assert_eq!(pd.sizes(), vec![8, 2]);
}

fn sorted_events(raw: Vec<u8>) -> Vec<Interaction> {
    let mut ts: Vec<i64> = raw.into_iter().map(|t| i64::from(t) + 1).collect();
    ts.sort_unstable();
    events(&ts)
}

proptest! {
    #[test]
    fn partition_is_an_ordered_bijection(raw in prop::collection::vec(0u8..40, 2..80), p in 2usize..6) {
        let evs = sorted_events(raw);
        let Ok(pd) = partition_interactions(&evs, p, PartitionMode::EqualCount) else {
            return Ok(());
        };
        let flat: Vec<Interaction> = pd.periods.iter().flatten().cloned().collect();
        prop_assert_eq!(&flat, &evs);
        prop_assert!(pd.periods.iter().all(|per| !per.is_empty()));
        for w in pd.periods.windows(2) {
            prop_assert!(w[0].last().unwrap().timestamp < w[1][0].timestamp);
        }
        let ts: Vec<i64> = evs.iter().map(|e| e.timestamp).collect();
        prop_assert!(valid_cut_sets(&ts, p).contains(&cuts_of(&pd)) || ts.len() > 20);
    }

    #[test]
    fn distinct_timestamps_balance_within_one(n in 10usize..200, p in 2usize..10) {
        let ts: Vec<i64> = (1..=n as i64).collect();
        let pd = partition_interactions(&events(&ts), p, PartitionMode::EqualCount).unwrap();
        let sizes = pd.sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn splits_never_leak(seed in any::<u64>(), val in 0usize..5, test in 0usize..5) {
        let evs = user_stream("u", &(1..=60).collect::<Vec<_>>());
        let pd = partition_interactions(&evs, 6, PartitionMode::EqualCount).unwrap();
        let plan = SplitPlan { train_periods: 0..3, val_size: val, test_period: 5, test_size: test, seed };
        let s = make_split(&pd, &plan).unwrap();
        prop_assert_eq!(s.val.len(), val);
        prop_assert_eq!(s.test.len(), test);
        prop_assert_eq!(s.train.len() + s.val.len(), 30);
        let max_train = s.train.iter().chain(&s.val).map(|e| e.timestamp).max().unwrap();
        prop_assert!(s.test.iter().all(|e| e.timestamp > max_train));
        prop_assert!(s.val.iter().all(|v| s.train.iter().all(|t| t.timestamp < v.timestamp)));
    }
}

#[test]
fn split_rejects_bad_plans() {
    let evs = user_stream("u", &(1..=60).collect::<Vec<_>>());
    let pd = partition_interactions(&evs, 6, PartitionMode::EqualCount).unwrap();
    let base = SplitPlan { train_periods: 0..3, val_size: 2, test_period: 5, test_size: 2, seed: 1 };
    let too_big = SplitPlan { val_size: 11, ..base.clone() };
    assert!(matches!(make_split(&pd, &too_big), Err(Error::SizeExceeded { .. })));
    let overlap = SplitPlan { test_period: 2, ..base.clone() };
    assert!(matches!(make_split(&pd, &overlap), Err(Error::Leakage(_))));
    let many = SplitPlan { test_size: 11, ..base };
    assert!(matches!(make_split(&pd, &many), Err(Error::SizeExceeded { .. })));
}

#[test]
fn default_protocol_on_simulated_catalog() {
    let gt = generate(&DriftConfig::default()).unwrap();
    let pd = partition(&gt.catalog, 10, PartitionMode::EqualCount).unwrap();
    assert_eq!(pd.sizes(), vec![12_000; 10]);
    let plan = SplitPlan::default_with_seed(11);
    let s = make_split(&pd, &plan).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (55_000, 5_000, 5_000));
    assert_eq!(s.val, pd.periods[4][7_000..].to_vec());
    assert!(s.test.iter().all(|e| pd.period_of(e.timestamp) == 9));
    let again = make_split(&pd, &plan).unwrap();
    assert_eq!(s.test, again.test);

    let (f4, f8) = snapshot_pair(&pd, 4, 8, Some(9)).unwrap();
    assert_eq!((f4.len(), f8.len()), (60_000, 108_000));
    assert!(snapshot_pair(&pd, 4, 9, Some(9)).is_err());
}
