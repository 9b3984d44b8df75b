use std::collections::HashSet;

use proptest::prelude::*;
use recicl::metrics::*;
use recicl::Error;

fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    num / pairs
}

fn scored_fixture() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::sample::select(vec![0.0, 0.1, 0.25, 0.5, 0.5, 0.9, 1.0]), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #[test]
    fn auc_matches_pairwise_definition((scores, mut labels) in scored_fixture()) {
        labels[0] = true;
        labels[1] = false;
        let a = auc(&scores, &labels).unwrap();
        prop_assert!((a - brute_force_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_under_monotone_transform((scores, mut labels) in scored_fixture()) {
        labels[0] = true;
        labels[1] = false;
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&squashed, &labels).unwrap());
    }

    #[test]
    fn flipping_scores_complements_auc((scores, mut labels) in scored_fixture()) {
        labels[0] = true;
        labels[1] = false;
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = auc(&scores, &labels).unwrap() + auc(&neg, &labels).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn auc_errors() {
    assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::AucUndefined(_))));
    assert!(auc(&[0.1], &[true, false]).is_err());
    assert!(auc(&[f64::NAN, 0.2], &[true, false]).is_err());
}

#[test]
fn drift_formulas() {
    assert!((pdt(0.80, 0.75) - 0.05).abs() < 1e-12);
    assert!((pdm(0.7396, 0.7111) - 0.0285).abs() < 1e-12);
    assert!((rel_imp(0.8401, 0.6193) - 22.08).abs() < 1e-9);
    assert!((rbr(0.0031, 0.0882).unwrap() - 0.0351).abs() < 5e-4);
    assert_eq!(rbr(0.0, 0.05).unwrap(), 0.0);
    assert!(matches!(rbr(0.0031, 0.0), Err(Error::Undefined(_))));
    assert!((delta_auc(0.83, 0.71) - 0.12).abs() < 1e-12);
}

#[test]
fn groups_partition_the_scored_set() {
    let ex: Vec<ScoredExample> = (0..40)
        .map(|k| ScoredExample {
            user_id: format!("u{}", k % 7),
            timestamp: k,
            p_yes: (k as f64 * 0.37) % 1.0,
            label: k % 3 == 0,
        })
        .collect();
    let train: HashSet<String> = ["u0", "u1", "u2"].iter().map(|s| s.to_string()).collect();
    let g = group_auc(&ex, &Grouping::SeenUnseen(&train));
    assert_eq!(g["seen"].count + g["unseen"].count, ex.len());
    let r = EvalReport::build(&ex, 2, &[1.0, 2.0], Some(&Grouping::SeenUnseen(&train)), "d");
    assert!(r.partial);
    assert_eq!(r.n_scored, 40);

    let by_period = group_auc(&ex, &Grouping::ByPeriod(&[10, 20]));
    assert_eq!(by_period.values().map(|g| g.count).sum::<usize>(), 40);
}

#[test]
fn latency_percentiles_use_nearest_rank() {
    let l: Vec<f64> = (1..=20).map(f64::from).collect();
    let s = latency_stats(&l);
    assert_eq!((s.p50_ms, s.p95_ms), (10.0, 19.0));
    assert!((s.mean_ms - 10.5).abs() < 1e-12);
}

#[test]
fn comparison_table_has_derived_columns() {
    let cmp = Comparison {
        dataset: "Books".into(),
        ours: MethodResult { name: "ours".into(), auc: 0.8401, pdm: Some(0.0031) },
        baselines: vec![MethodResult { name: "MF".into(), auc: 0.6193, pdm: Some(0.0882) }],
    };
    let rows = cmp.rows();
    assert!((rows[0].rel_imp.unwrap() - 22.08).abs() < 1e-9);
    let table = cmp.render_table();
    assert!(table.contains("22.08%") && table.contains("0.0351"));
}
