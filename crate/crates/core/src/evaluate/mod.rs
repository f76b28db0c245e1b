//! Metric suite, weighted logit ensembling, the validation α sweep and
//! report generation.

pub mod io;
pub mod metrics;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use metrics::{
    f_score, macro_mean, metric_registry, pr_auc, roc_auc, tpr_tnr, Confusion, FScore, MacroValue, Metric, PrAuc,
    RocAuc,
};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_shapes(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// `α · l_short + (1 − α) · l_long`, elementwise.
pub fn ensemble(l_short: &Array2<f64>, l_long: &Array2<f64>, alpha: f64) -> Result<Array2<f64>> {
    check_shapes(l_short.dim(), l_long.dim(), "ensemble inputs")?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut out = l_long.clone();
    out.zip_mut_with(l_short, |l, &s| *l = alpha * s + (1.0 - alpha) * *l);
    Ok(out)
}

/// `{0, 0.05, ..., 1}`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Grid point maximising the macro objective on sigmoid probabilities of the
/// ensembled logits. Ties and undefined values go to the smaller α.
pub fn sweep_alpha(
    l_short: &Array2<f64>,
    l_long: &Array2<f64>,
    labels: &Array2<bool>,
    grid: &[f64],
    objective: &dyn Metric,
) -> Result<(f64, Vec<(f64, f64)>)> {
    check_shapes(l_short.dim(), labels.dim(), "logits vs labels")?;
    if grid.is_empty() {
        return Err(Error::Config("alpha grid is empty".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut curve = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, f64)> = None;
    for &a in &sorted {
        let probs = ensemble(l_short, l_long, a)?.mapv(sigmoid);
        let v = objective.macro_average(&probs, labels).value;
        curve.push((a, v));
        if best.is_none_or(|(_, b)| v > b || (b.is_nan() && !v.is_nan())) {
            best = Some((a, v));
        }
    }
    Ok((best.unwrap().0, curve))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    Macro,
    Micro,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportConfig {
    pub averaging: Averaging,
    pub threshold: f64,
    /// Per-tag thresholds tuned on validation data; reported alongside the
    /// fixed threshold when present.
    pub tuned_thresholds: Option<Vec<f64>>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            averaging: Averaging::Macro,
            threshold: 0.5,
            tuned_thresholds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagMetrics {
    pub tag: String,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub f_score: f64,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub threshold: f64,
}

/// Threshold-dependent metrics under one decision rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    /// `fixed` or `tuned`.
    pub rule: String,
    pub f_score: f64,
    pub avg_tpr: f64,
    pub avg_tnr: f64,
    pub thresholds: Vec<f64>,
    pub per_tag: Vec<TagMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub averaging: Averaging,
    pub num_tracks: usize,
    pub num_tags: usize,
    pub roc_auc: f64,
    pub roc_auc_tags: usize,
    pub pr_auc: f64,
    pub pr_auc_tags: usize,
    pub f_score: f64,
    pub avg_tpr: f64,
    pub avg_tnr: f64,
    pub decision_threshold: f64,
    pub per_tag: Vec<TagMetrics>,
    pub tuned: Option<ThresholdMetrics>,
}

fn threshold_metrics(
    probs: &Array2<f64>,
    labels: &Array2<bool>,
    tags: &[String],
    thresholds: &[f64],
    rule: &str,
) -> ThresholdMetrics {
    let per_tag: Vec<TagMetrics> = metrics::columns(probs, labels)
        .enumerate()
        .map(|(j, (s, l))| {
            let c = Confusion::at(&s, &l, thresholds[j]);
            TagMetrics {
                tag: tags[j].clone(),
                roc_auc: roc_auc(&s, &l),
                pr_auc: pr_auc(&s, &l),
                f_score: c.f1(),
                tpr: c.tpr(),
                tnr: c.tnr(),
                threshold: thresholds[j],
            }
        })
        .collect();
    let f: Vec<Option<f64>> = per_tag.iter().map(|t| Some(t.f_score)).collect();
    let tpr: Vec<Option<f64>> = per_tag.iter().map(|t| t.tpr).collect();
    let tnr: Vec<Option<f64>> = per_tag.iter().map(|t| t.tnr).collect();
    ThresholdMetrics {
        rule: rule.into(),
        f_score: macro_mean(&f).value,
        avg_tpr: macro_mean(&tpr).value,
        avg_tnr: macro_mean(&tnr).value,
        thresholds: thresholds.to_vec(),
        per_tag,
    }
}

fn micro_threshold(probs: &Array2<f64>, labels: &Array2<bool>, threshold: f64) -> (f64, f64, f64) {
    let s: Vec<f64> = probs.iter().copied().collect();
    let l: Vec<bool> = labels.iter().copied().collect();
    let c = Confusion::at(&s, &l, threshold);
    (c.f1(), c.tpr().unwrap_or(f64::NAN), c.tnr().unwrap_or(f64::NAN))
}

/// All five metrics plus the per-tag table for probability scores.
pub fn report(
    probs: &Array2<f64>,
    labels: &Array2<bool>,
    tags: &[String],
    cfg: &ReportConfig,
) -> Result<MetricsReport> {
    check_shapes(probs.dim(), labels.dim(), "predictions vs labels")?;
    if tags.len() != probs.ncols() {
        return Err(Error::Shape(format!(
            "{} tag names for {} columns",
            tags.len(),
            probs.ncols()
        )));
    }
    let fixed = vec![cfg.threshold; tags.len()];
    let base = threshold_metrics(probs, labels, tags, &fixed, "fixed");
    let (roc, pr, f, tpr, tnr) = match cfg.averaging {
        Averaging::Macro => (
            RocAuc.macro_average(probs, labels),
            PrAuc.macro_average(probs, labels),
            base.f_score,
            base.avg_tpr,
            base.avg_tnr,
        ),
        Averaging::Micro => {
            let (f, tpr, tnr) = micro_threshold(probs, labels, cfg.threshold);
            (
                RocAuc.micro_average(probs, labels),
                PrAuc.micro_average(probs, labels),
                f,
                tpr,
                tnr,
            )
        }
    };
    let tuned = match &cfg.tuned_thresholds {
        Some(t) if t.len() != tags.len() => {
            return Err(Error::Shape(format!(
                "{} tuned thresholds for {} tags",
                t.len(),
                tags.len()
            )))
        }
        Some(t) => Some(threshold_metrics(probs, labels, tags, t, "tuned")),
        None => None,
    };
    Ok(MetricsReport {
        averaging: cfg.averaging,
        num_tracks: probs.nrows(),
        num_tags: tags.len(),
        roc_auc: roc.value,
        roc_auc_tags: roc.included,
        pr_auc: pr.value,
        pr_auc_tags: pr.included,
        f_score: f,
        avg_tpr: tpr,
        avg_tnr: tnr,
        decision_threshold: cfg.threshold,
        per_tag: base.per_tag,
        tuned,
    })
}

/// Per-tag threshold maximising F1 over the observed scores; the highest
/// such score wins ties. Tags without positives keep `fallback`.
pub fn tune_thresholds(probs: &Array2<f64>, labels: &Array2<bool>, fallback: f64) -> Result<Vec<f64>> {
    check_shapes(probs.dim(), labels.dim(), "predictions vs labels")?;
    Ok(metrics::columns(probs, labels)
        .map(|(s, l)| {
            if !l.iter().any(|&x| x) {
                return fallback;
            }
            let mut cands = s.clone();
            cands.sort_by(|a, b| b.total_cmp(a));
            cands.dedup();
            let mut best = (f64::NEG_INFINITY, fallback);
            for t in cands {
                let f = f_score(&s, &l, t);
                if f > best.0 {
                    best = (f, t);
                }
            }
            best.1
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn ensemble_examples() {
        let e = ensemble(&array![[1.0]], &array![[0.0]], 0.7).unwrap();
        assert_eq!(e[[0, 0]], 0.7);
        let long = array![[1.0, 1.0]];
        let e = ensemble(&array![[0.2, -1.0]], &long, 0.7).unwrap();
        assert_eq!(e[[0, 0]], 0.7 * 0.2 + (1.0 - 0.7) * 1.0);
        assert_eq!(e[[0, 1]], -0.7 + (1.0 - 0.7) * 1.0);
        assert!((e[[0, 0]] - 0.44).abs() < 1e-12 && (e[[0, 1]] + 0.4).abs() < 1e-12);
        assert_eq!(ensemble(&array![[5.0, -2.0]], &long, 0.0).unwrap(), long);
        assert!(matches!(ensemble(&array![[1.0]], &long, 0.5), Err(Error::Shape(_))));
        assert!(ensemble(&long, &long, 1.5).is_err());
    }

    #[test]
    fn ensemble_half_is_symmetric() {
        let mut r = crate::rng::stream(3, &[]);
        let a = Array2::from_shape_fn((5, 3), |_| r.gen_range(-4.0..4.0));
        let b = Array2::from_shape_fn((5, 3), |_| r.gen_range(-4.0..4.0));
        assert_eq!(ensemble(&a, &b, 0.5).unwrap(), ensemble(&b, &a, 0.5).unwrap());
    }

    fn col(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
    }

    fn lab(v: &[bool]) -> Array2<bool> {
        Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
    }

    #[test]
    fn sweep_prefers_dominant_short_model() {
        let labels = lab(&[true, true, false, false]);
        // The anti-ranking margin is large enough that any weight on the
        // long model breaks the ranking.
        let short = col(&[0.02, 0.01, 0.0, -0.01]);
        let long = col(&[0.0, 0.0, 10.0, 10.0]);
        let (a, curve) = sweep_alpha(&short, &long, &labels, &default_alpha_grid(), &PrAuc).unwrap();
        assert_eq!(a, 1.0);
        assert_eq!(curve.len(), 21);
        let (a, _) = sweep_alpha(&long, &short, &labels, &default_alpha_grid(), &PrAuc).unwrap();
        assert_eq!(a, 0.0);
    }

    #[test]
    fn sweep_ties_pick_smallest_alpha() {
        let labels = lab(&[true, false, true, false]);
        let l = col(&[0.3, 0.1, -0.2, 0.5]);
        let (a, curve) = sweep_alpha(&l, &l, &labels, &[0.5, 1.0, 0.25], &PrAuc).unwrap();
        assert_eq!(a, 0.25);
        assert!(curve.windows(2).all(|w| w[0].1 == w[1].1));
    }

    #[test]
    fn sweep_finds_mid_optimum() {
        // Each endpoint misranks one negative above a positive; the average
        // ranks both positives first.
        let labels = lab(&[true, true, false, false]);
        let short = col(&[2.0, 0.0, 1.0, -2.0]);
        let long = col(&[0.0, 2.0, -2.0, 1.0]);
        let grid = [0.0, 0.5, 1.0];
        let (a, curve) = sweep_alpha(&short, &long, &labels, &grid, &PrAuc).unwrap();
        assert!(curve[1].1 > curve[0].1 && curve[1].1 > curve[2].1);
        assert_eq!(a, 0.5);
    }

    #[test]
    fn identity_predictions_score_one() {
        let labels = Array2::from_shape_fn((6, 3), |(i, j)| (i + j) % 2 == 0);
        let probs = labels.mapv(|l| if l { 1.0 } else { 0.0 });
        let tags: Vec<String> = (0..3).map(|i| format!("t{i}")).collect();
        let r = report(&probs, &labels, &tags, &ReportConfig::default()).unwrap();
        for v in [r.roc_auc, r.pr_auc, r.f_score, r.avg_tpr, r.avg_tnr] {
            assert_eq!(v, 1.0);
        }
        assert_eq!((r.roc_auc_tags, r.pr_auc_tags), (3, 3));
    }

    #[test]
    fn random_scores_have_chance_auc() {
        let mut r = crate::rng::stream(11, &[]);
        let probs = Array2::from_shape_fn((1000, 10), |_| r.gen::<f64>());
        let labels = Array2::from_shape_fn((1000, 10), |(i, _)| i % 2 == 0);
        let tags: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        let rep = report(&probs, &labels, &tags, &ReportConfig::default()).unwrap();
        assert!((rep.roc_auc - 0.5).abs() < 0.02, "{}", rep.roc_auc);
    }

    #[test]
    fn single_tag_macro_equals_per_tag() {
        let probs = col(&[0.9, 0.8, 0.3, 0.2]);
        let labels = lab(&[true, false, true, false]);
        let r = report(&probs, &labels, &["x".into()], &ReportConfig::default()).unwrap();
        assert_eq!(r.roc_auc, r.per_tag[0].roc_auc.unwrap());
        assert_eq!(r.pr_auc, r.per_tag[0].pr_auc.unwrap());
        assert_eq!(r.f_score, r.per_tag[0].f_score);
    }

    #[test]
    fn undefined_tags_are_excluded() {
        let probs = Array2::from_shape_vec((2, 2), vec![0.9, 0.1, 0.1, 0.2]).unwrap();
        let labels = Array2::from_shape_vec((2, 2), vec![true, false, false, false]).unwrap();
        let r = report(&probs, &labels, &["a".into(), "b".into()], &ReportConfig::default()).unwrap();
        assert_eq!((r.roc_auc, r.roc_auc_tags), (1.0, 1));
        assert!(report(&probs, &labels, &["a".into()], &ReportConfig::default()).is_err());
    }

    #[test]
    fn tuned_thresholds_reported_alongside_fixed() {
        let probs = col(&[0.4, 0.3, 0.2, 0.1]);
        let labels = lab(&[true, true, false, false]);
        let t = tune_thresholds(&probs, &labels, 0.5).unwrap();
        assert_eq!(t, vec![0.3]);
        let cfg = ReportConfig {
            tuned_thresholds: Some(t),
            ..Default::default()
        };
        let r = report(&probs, &labels, &["x".into()], &cfg).unwrap();
        assert_eq!(r.f_score, 0.0);
        assert_eq!(r.tuned.unwrap().f_score, 1.0);
    }

    #[test]
    fn micro_pools_cells() {
        let probs = Array2::from_shape_vec((2, 2), vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let labels = Array2::from_shape_vec((2, 2), vec![true, false, false, true]).unwrap();
        let cfg = ReportConfig {
            averaging: Averaging::Micro,
            ..Default::default()
        };
        let r = report(&probs, &labels, &["a".into(), "b".into()], &cfg).unwrap();
        assert_eq!((r.roc_auc, r.roc_auc_tags), (1.0, 1));
        assert_eq!(r.f_score, 1.0);
    }
}
