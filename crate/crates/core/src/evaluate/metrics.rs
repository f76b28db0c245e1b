//! Per-tag ranking and threshold metrics and their macro/micro aggregation.

use std::cmp::Ordering;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::registry::{Named, Registry};

fn desc_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Probability that a random positive outranks a random negative, ties
/// counted as one half. `None` unless both classes are present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // Walk tie groups in descending order, crediting each positive with the
    // negatives strictly below it plus half the tied negatives.
    let order = desc_order(scores);
    let mut credit = 0.0;
    let mut neg_seen = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                gp += 1
            } else {
                gn += 1
            }
            j += 1;
        }
        let below = neg - neg_seen - gn;
        credit += gp as f64 * below as f64 + gp as f64 * gn as f64 * 0.5;
        neg_seen += gn;
        i = j;
    }
    Some(credit / (pos as f64 * neg as f64))
}

/// Average precision `Σ_k (R_k − R_{k−1}) · P_k` over descending score
/// thresholds (tied scores form one threshold). `None` without positives.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let order = desc_order(scores);
    let (mut tp, mut k) = (0usize, 0usize);
    let mut recall_prev = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            tp += labels[order[j]] as usize;
            k += 1;
            j += 1;
        }
        let recall = tp as f64 / pos as f64;
        ap += (recall - recall_prev) * (tp as f64 / k as f64);
        recall_prev = recall;
        i = j;
    }
    Some(ap)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Scores `>= threshold` are predicted positive.
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    /// F1, zero when nothing is predicted positive or nothing is hit.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        let p = self.tp as f64 / (self.tp + self.fp) as f64;
        let r = self.tp as f64 / (self.tp + self.fn_) as f64;
        2.0 * p * r / (p + r)
    }

    pub fn tpr(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn tnr(&self) -> Option<f64> {
        let d = self.tn + self.fp;
        (d > 0).then(|| self.tn as f64 / d as f64)
    }
}

pub fn f_score(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    Confusion::at(scores, labels, threshold).f1()
}

/// Unweighted mean over tags where a metric is defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroValue {
    /// NaN when no tag is defined.
    pub value: f64,
    pub included: usize,
}

pub fn macro_mean(values: &[Option<f64>]) -> MacroValue {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    MacroValue {
        value: if defined.is_empty() {
            f64::NAN
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        },
        included: defined.len(),
    }
}

/// Per-tag TPR/TNR averaged over tags with nonzero denominators.
pub fn tpr_tnr(scores: &Array2<f64>, labels: &Array2<bool>, thresholds: &[f64]) -> (MacroValue, MacroValue) {
    let (tprs, tnrs): (Vec<_>, Vec<_>) = columns(scores, labels)
        .enumerate()
        .map(|(j, (s, l))| {
            let c = Confusion::at(&s, &l, thresholds[j]);
            (c.tpr(), c.tnr())
        })
        .unzip();
    (macro_mean(&tprs), macro_mean(&tnrs))
}

pub(crate) fn columns<'a>(
    scores: &'a Array2<f64>,
    labels: &'a Array2<bool>,
) -> impl Iterator<Item = (Vec<f64>, Vec<bool>)> + 'a {
    scores
        .axis_iter(Axis(1))
        .zip(labels.axis_iter(Axis(1)))
        .map(|(s, l): (ArrayView1<f64>, ArrayView1<bool>)| (s.to_vec(), l.to_vec()))
}

/// A named per-tag metric over probability scores.
pub trait Metric: Named + Send + Sync {
    fn per_tag(&self, scores: &[f64], labels: &[bool]) -> Option<f64>;

    fn macro_average(&self, scores: &Array2<f64>, labels: &Array2<bool>) -> MacroValue {
        let v: Vec<Option<f64>> = columns(scores, labels).map(|(s, l)| self.per_tag(&s, &l)).collect();
        macro_mean(&v)
    }

    /// All cells pooled as one binary problem.
    fn micro_average(&self, scores: &Array2<f64>, labels: &Array2<bool>) -> MacroValue {
        let s: Vec<f64> = scores.iter().copied().collect();
        let l: Vec<bool> = labels.iter().copied().collect();
        let v = self.per_tag(&s, &l);
        MacroValue {
            value: v.unwrap_or(f64::NAN),
            included: v.is_some() as usize,
        }
    }
}

pub struct RocAuc;
pub struct PrAuc;
pub struct FScore {
    pub threshold: f64,
}

impl Named for RocAuc {
    fn name(&self) -> &str {
        "roc_auc"
    }
}
impl Metric for RocAuc {
    fn per_tag(&self, scores: &[f64], labels: &[bool]) -> Option<f64> {
        roc_auc(scores, labels)
    }
}

impl Named for PrAuc {
    fn name(&self) -> &str {
        "pr_auc"
    }
}
impl Metric for PrAuc {
    fn per_tag(&self, scores: &[f64], labels: &[bool]) -> Option<f64> {
        pr_auc(scores, labels)
    }
}

impl Named for FScore {
    fn name(&self) -> &str {
        "f_score"
    }
}
impl Metric for FScore {
    fn per_tag(&self, scores: &[f64], labels: &[bool]) -> Option<f64> {
        Some(f_score(scores, labels, self.threshold))
    }
}

pub fn metric_registry(threshold: f64) -> Registry<dyn Metric> {
    let mut reg: Registry<dyn Metric> = Registry::new("metric");
    reg.register(Arc::new(RocAuc));
    reg.register(Arc::new(PrAuc));
    reg.register(Arc::new(FScore { threshold }));
    reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const S: [f64; 4] = [0.9, 0.8, 0.3, 0.2];

    #[test]
    fn roc_examples() {
        assert_eq!(roc_auc(&S, &[true, true, false, false]), Some(1.0));
        assert_eq!(roc_auc(&S, &[true, false, true, false]), Some(0.75));
        assert_eq!(roc_auc(&S, &[true; 4]), None);
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]), Some(0.5));
    }

    #[test]
    fn pr_examples() {
        assert_eq!(pr_auc(&S, &[true, true, false, false]), Some(1.0));
        let v = pr_auc(&S, &[true, false, true, false]).unwrap();
        assert!((v - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert!((v - 0.8333).abs() < 1e-4);
        assert_eq!(pr_auc(&S, &[false, false, false, true]), Some(0.25));
        assert_eq!(pr_auc(&S, &[false; 4]), None);
    }

    #[test]
    fn f_examples() {
        let labels = [true, false, true, false];
        let preds = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(f_score(&preds, &labels, 0.5), 1.0);
        // TP=1, FP=1, FN=1
        assert!((f_score(&[0.9, 0.9, 0.1, 0.1], &labels, 0.5) - 0.5).abs() < 1e-15);
        assert_eq!(f_score(&[0.1; 4], &labels, 0.5), 0.0);
    }

    #[test]
    fn tpr_tnr_examples() {
        let labels = Array2::from_shape_vec((4, 1), vec![true, false, true, false]).unwrap();
        let perfect = labels.mapv(|l| if l { 1.0 } else { 0.0 });
        let (tpr, tnr) = tpr_tnr(&perfect, &labels, &[0.5]);
        assert_eq!((tpr.value, tnr.value), (1.0, 1.0));
        let always = Array2::from_elem((4, 1), 1.0);
        let (tpr, tnr) = tpr_tnr(&always, &labels, &[0.5]);
        assert_eq!((tpr.value, tnr.value), (1.0, 0.0));

        // tag 0: TPR 0.5, TNR 1.0; tag 1: TPR 1.0, TNR 0.8
        let mut l = Array2::from_elem((7, 2), false);
        let mut s = Array2::zeros((7, 2));
        l[[0, 0]] = true;
        l[[1, 0]] = true;
        s[[0, 0]] = 1.0;
        l[[0, 1]] = true;
        l[[1, 1]] = true;
        s[[0, 1]] = 1.0;
        s[[1, 1]] = 1.0;
        s[[2, 1]] = 1.0;
        let (tpr, tnr) = tpr_tnr(&s, &l, &[0.5, 0.5]);
        assert!((tpr.value - 0.75).abs() < 1e-15);
        assert!((tnr.value - 0.9).abs() < 1e-15);
    }

    #[test]
    fn macro_drops_undefined() {
        let m = macro_mean(&[Some(1.0), None, Some(0.5)]);
        assert_eq!((m.value, m.included), (0.75, 2));
        assert!(macro_mean(&[None]).value.is_nan());
    }

    proptest! {
        #[test]
        fn roc_is_invariant_under_monotone_transforms(
            scores in proptest::collection::vec(-5.0f64..5.0, 2..40),
            bits in proptest::collection::vec(any::<bool>(), 40),
        ) {
            let labels = &bits[..scores.len()];
            let a = roc_auc(&scores, labels);
            let lin: Vec<f64> = scores.iter().map(|s| 2.0 * s + 1.0).collect();
            let sig: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
            prop_assert_eq!(a, roc_auc(&lin, labels));
            prop_assert_eq!(a, roc_auc(&sig, labels));
        }

        #[test]
        fn threshold_metrics_ignore_non_crossing_changes(
            scores in proptest::collection::vec(0.0f64..1.0, 1..30),
            bits in proptest::collection::vec(any::<bool>(), 30),
        ) {
            let labels = &bits[..scores.len()];
            // push every score away from 0.5 without crossing it
            let moved: Vec<f64> = scores.iter().map(|&s| if s >= 0.5 { 0.5 + (s - 0.5) / 2.0 } else { s / 2.0 }).collect();
            prop_assert_eq!(f_score(&scores, labels, 0.5), f_score(&moved, labels, 0.5));
            prop_assert_eq!(Confusion::at(&scores, labels, 0.5), Confusion::at(&moved, labels, 0.5));
        }
    }
}
