//! AUC and the drift metrics derived from it.
//!
//! AUC follows the Mann-Whitney formulation: the fraction of
//! (positive, negative) pairs ranked correctly, ties counting one half.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Rank-sum AUC, `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Invalid(format!("score {s} is not comparable")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::AucUndefined(format!(
            "{positives} positive and {negatives} negative labels"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (1-based, tie-averaged) ranks of the positives, kept doubled so
    // it stays an exact integer.
    let mut pos_rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let rank_x2 = (i + 1 + j) as u128; // 2 * mean of ranks i+1..=j
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        pos_rank_sum_x2 += rank_x2 * pos_in_group;
        i = j;
    }
    let p = positives as u128;
    let u_x2 = pos_rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// Performance drop of one snapshot from an early to a late test period.
/// Positive means degradation.
pub fn pdt(auc_early_test: f64, auc_late_test: f64) -> f64 {
    auc_early_test - auc_late_test
}

/// Gain of an updated snapshot over a stale one on the same test period.
pub fn pdm(auc_updated: f64, auc_stale: f64) -> f64 {
    auc_updated - auc_stale
}

/// AUC advantage in percentage points.
pub fn rel_imp(auc_ours: f64, auc_base: f64) -> f64 {
    (auc_ours - auc_base) * 100.0
}

/// Ratio of our PDM to a baseline's PDM; lower is better.
pub fn rbr(pdm_ours: f64, pdm_base: f64) -> Result<f64> {
    if pdm_base == 0.0 {
        return Err(Error::Undefined("RBR with zero baseline PDM".into()));
    }
    Ok(pdm_ours / pdm_base)
}

pub fn delta_auc(auc_with_icl: f64, auc_without: f64) -> f64 {
    auc_with_icl - auc_without
}

/// The AUCs behind one drift comparison and everything derived from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftMetrics {
    /// Stale snapshot on the early test period.
    pub auc_stale_early: f64,
    /// Stale snapshot on the late test period.
    pub auc_stale_late: f64,
    /// Updated snapshot on the late test period.
    pub auc_updated_late: f64,
    /// Stale snapshot without few-shot context, late period (if measured).
    pub auc_stale_late_no_icl: Option<f64>,
    pub pdt: f64,
    pub pdm: f64,
    pub delta_auc: Option<f64>,
}

impl DriftMetrics {
    pub fn new(
        auc_stale_early: f64,
        auc_stale_late: f64,
        auc_updated_late: f64,
        auc_stale_late_no_icl: Option<f64>,
    ) -> Self {
        DriftMetrics {
            auc_stale_early,
            auc_stale_late,
            auc_updated_late,
            auc_stale_late_no_icl,
            pdt: pdt(auc_stale_early, auc_stale_late),
            pdm: pdm(auc_updated_late, auc_stale_late),
            delta_auc: auc_stale_late_no_icl.map(|b| delta_auc(auc_stale_late, b)),
        }
    }

    /// Recomputes the derived fields from the stored AUCs.
    pub fn is_consistent(&self) -> bool {
        let again = DriftMetrics::new(
            self.auc_stale_early,
            self.auc_stale_late,
            self.auc_updated_late,
            self.auc_stale_late_no_icl,
        );
        again == *self
    }
}

/// A scored, labeled test event with enough metadata to group it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub user_id: String,
    pub timestamp: i64,
    pub p_yes: f64,
    pub label: bool,
}

pub enum Grouping<'a> {
    /// "seen" if the user occurs in the training users, else "unseen".
    SeenUnseen(&'a HashSet<String>),
    /// "period_XX" by the given period boundaries.
    ByPeriod(&'a [i64]),
}

impl Grouping<'_> {
    fn key(&self, ex: &ScoredExample) -> String {
        match self {
            Grouping::SeenUnseen(train) => {
                if train.contains(&ex.user_id) {
                    "seen".into()
                } else {
                    "unseen".into()
                }
            }
            Grouping::ByPeriod(bounds) => {
                format!("period_{:02}", bounds.partition_point(|&b| b <= ex.timestamp))
            }
        }
    }

    fn all_keys(&self) -> Vec<String> {
        match self {
            Grouping::SeenUnseen(_) => vec!["seen".into(), "unseen".into()],
            Grouping::ByPeriod(_) => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAuc {
    pub count: usize,
    pub positives: usize,
    pub negatives: usize,
    /// `None` when the group lacks one of the two classes.
    pub auc: Option<f64>,
}

impl GroupAuc {
    pub fn pairs(&self) -> usize {
        self.positives * self.negatives
    }
}

pub fn group_auc(examples: &[ScoredExample], grouping: &Grouping<'_>) -> BTreeMap<String, GroupAuc> {
    let mut buckets: BTreeMap<String, (Vec<f64>, Vec<bool>)> = grouping
        .all_keys()
        .into_iter()
        .map(|k| (k, (Vec::new(), Vec::new())))
        .collect();
    for ex in examples {
        let b = buckets.entry(grouping.key(ex)).or_default();
        b.0.push(ex.p_yes);
        b.1.push(ex.label);
    }
    buckets
        .into_iter()
        .map(|(k, (scores, labels))| {
            let positives = labels.iter().filter(|&&l| l).count();
            let g = GroupAuc {
                count: labels.len(),
                positives,
                negatives: labels.len() - positives,
                auc: auc(&scores, &labels).ok(),
            };
            (k, g)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub total_ms: f64,
}

/// Nearest-rank percentile (`q` in (0, 100]) of an ascending slice.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn latency_stats(latencies_ms: &[f64]) -> LatencyStats {
    if latencies_ms.is_empty() {
        return LatencyStats::default();
    }
    let mut v = latencies_ms.to_vec();
    v.sort_by(f64::total_cmp);
    let total: f64 = v.iter().sum();
    LatencyStats {
        mean_ms: total / v.len() as f64,
        p50_ms: nearest_rank(&v, 50.0),
        p95_ms: nearest_rank(&v, 95.0),
        total_ms: total,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: Option<f64>,
    pub n_scored: usize,
    pub n_failed: usize,
    /// Set when some instances failed and the AUC covers only the rest.
    pub partial: bool,
    pub groups: BTreeMap<String, GroupAuc>,
    pub latency: LatencyStats,
    pub config_digest: String,
}

impl EvalReport {
    pub fn build(
        examples: &[ScoredExample],
        n_failed: usize,
        latencies_ms: &[f64],
        grouping: Option<&Grouping<'_>>,
        config_digest: impl Into<String>,
    ) -> Self {
        let scores: Vec<f64> = examples.iter().map(|e| e.p_yes).collect();
        let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
        EvalReport {
            auc: auc(&scores, &labels).ok(),
            n_scored: examples.len(),
            n_failed,
            partial: n_failed > 0,
            groups: grouping.map(|g| group_auc(examples, g)).unwrap_or_default(),
            latency: latency_stats(latencies_ms),
            config_digest: config_digest.into(),
        }
    }
}

/// One method's headline numbers in a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub name: String,
    pub auc: f64,
    pub pdm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset: String,
    pub ours: MethodResult,
    pub baselines: Vec<MethodResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub auc: f64,
    pub rel_imp: Option<f64>,
    pub pdm: Option<f64>,
    pub rbr: Option<f64>,
}

impl Comparison {
    /// Baseline rows with Rel Imp and RBR against `ours`, followed by ours.
    pub fn rows(&self) -> Vec<ComparisonRow> {
        let mut rows: Vec<ComparisonRow> = self
            .baselines
            .iter()
            .map(|b| ComparisonRow {
                name: b.name.clone(),
                auc: b.auc,
                rel_imp: Some(rel_imp(self.ours.auc, b.auc)),
                pdm: b.pdm,
                rbr: match (self.ours.pdm, b.pdm) {
                    (Some(o), Some(p)) => rbr(o, p).ok(),
                    _ => None,
                },
            })
            .collect();
        rows.push(ComparisonRow {
            name: self.ours.name.clone(),
            auc: self.ours.auc,
            rel_imp: None,
            pdm: self.ours.pdm,
            rbr: None,
        });
        rows
    }

    pub fn render_table(&self) -> String {
        let opt = |v: Option<f64>, prec: usize, suffix: &str| match v {
            Some(x) => format!("{x:.prec$}{suffix}"),
            None => "-".to_string(),
        };
        let mut s = format!(
            "{}\n{:<20} {:>8} {:>9} {:>8} {:>8}\n",
            self.dataset, "Method", "AUC", "Rel Imp", "PDM", "RBR"
        );
        for r in self.rows() {
            s.push_str(&format!(
                "{:<20} {:>8.4} {:>9} {:>8} {:>8}\n",
                r.name,
                r.auc,
                opt(r.rel_imp, 2, "%"),
                opt(r.pdm, 4, ""),
                opt(r.rbr, 4, "")
            ));
        }
        s
    }
}

/// Least-squares line through `(x, y)`; returns (intercept, slope, R²).
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (intercept, slope, r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_small_fixture() {
        let a = auc(&[0.9, 0.8, 0.3], &[true, false, true]).unwrap();
        assert_eq!(a, 0.5);
    }

    #[test]
    fn auc_separated_and_tied() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_is_undefined() {
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::AucUndefined(_))));
        assert!(matches!(auc(&[], &[]), Err(Error::AucUndefined(_))));
        assert!(auc(&[f64::NAN, 0.1], &[true, false]).is_err());
    }

    #[test]
    fn scalar_metrics() {
        assert!((pdt(0.80, 0.75) - 0.05).abs() < 1e-12);
        assert_eq!(pdt(0.7, 0.7), 0.0);
        assert_eq!(pdm(0.7, 0.7), 0.0);
        assert!((delta_auc(0.74, 0.71) - 0.03).abs() < 1e-12);
        assert_eq!(rel_imp(0.6, 0.6), 0.0);
        assert_eq!(rbr(0.0, 0.1).unwrap(), 0.0);
        assert!(matches!(rbr(0.1, 0.0), Err(Error::Undefined(_))));
    }

    #[test]
    fn pdm_reconstructs_printed_cell() {
        // f8 and f4 AUCs whose difference is the printed HashGNN Books PDM.
        let v = pdm(0.7681, 0.7396);
        assert!((v - 0.0285).abs() < 1e-9);
    }

    #[test]
    fn drift_metrics_recompute() {
        let d = DriftMetrics::new(0.8, 0.7, 0.76, Some(0.65));
        assert!((d.pdt - 0.1).abs() < 1e-12);
        assert!((d.pdm - 0.06).abs() < 1e-12);
        assert!((d.delta_auc.unwrap() - 0.05).abs() < 1e-12);
        assert!(d.is_consistent());
    }

    #[test]
    fn unseen_group_undefined_when_everyone_seen() {
        let train: HashSet<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let ex: Vec<ScoredExample> = [("a", 0.9, true), ("b", 0.1, false)]
            .iter()
            .map(|&(u, p, l)| ScoredExample {
                user_id: u.into(),
                timestamp: 1,
                p_yes: p,
                label: l,
            })
            .collect();
        let g = group_auc(&ex, &Grouping::SeenUnseen(&train));
        assert_eq!(g["seen"].auc, Some(1.0));
        assert_eq!(g["unseen"].count, 0);
        assert_eq!(g["unseen"].auc, None);
    }

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 50.0), 10.0);
        assert_eq!(nearest_rank(&v, 95.0), 19.0);
        assert_eq!(nearest_rank(&v, 100.0), 20.0);
        let s = latency_stats(&[3.0, 1.0, 2.0]);
        assert_eq!(s.p50_ms, 2.0);
        assert_eq!(s.mean_ms, 2.0);
    }

    #[test]
    fn fit_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let (a, b, r2) = linear_fit(&x, &y);
        assert!((a - 1.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_flags_partial() {
        let ex = vec![
            ScoredExample { user_id: "a".into(), timestamp: 1, p_yes: 0.9, label: true },
            ScoredExample { user_id: "a".into(), timestamp: 2, p_yes: 0.2, label: false },
        ];
        let r = EvalReport::build(&ex, 1, &[1.0, 2.0], None, "x");
        assert!(r.partial);
        assert_eq!(r.auc, Some(1.0));
    }
}
