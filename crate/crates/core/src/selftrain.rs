//! Noisy-student self-training: teacher scoring of unlabeled tracks,
//! percentile threshold calibration, ternary pseudo-labels and student
//! training on the labeled + pseudo-labeled union.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::sigmoid;
use crate::ingest::{label_matrix, Split, TrackManifest};
use crate::model::{BranchKind, Checkpoint, Role, TaggerModel};
use crate::registry::{Named, Registry};
use crate::train::{self, Chunker, FeatureStore, TrainConfig, TrainItem, TrainMode, TrainOutcome, Validator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PseudoLabel {
    Positive,
    Negative,
    Abstain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub pos: f64,
    pub neg: f64,
}

impl Thresholds {
    /// Positive above 0.1, negative below 1e-6.
    pub const FIXED: Thresholds = Thresholds { pos: 0.1, neg: 1e-6 };

    pub fn label(&self, p: f64) -> PseudoLabel {
        if p > self.pos {
            PseudoLabel::Positive
        } else if p < self.neg {
            PseudoLabel::Negative
        } else {
            PseudoLabel::Abstain
        }
    }
}

/// Sigmoid of chunk-averaged teacher logits, `[tracks × tags]`.
pub fn teacher_predict(
    teacher: &Checkpoint,
    mode: TrainMode,
    store: &dyn FeatureStore,
    track_ids: &[&str],
    batch_size: usize,
) -> Result<Array2<f64>> {
    if teacher.meta.mode != mode.as_str() {
        return Err(Error::Config(format!(
            "teacher was trained in {} mode but {} mode was requested",
            teacher.meta.mode, mode
        )));
    }
    if teacher.model.branch != BranchKind::Hpcp {
        return Err(Error::Config("the teacher must be an hpcp-fusion model".into()));
    }
    let mut model = teacher.build_model()?;
    let strategy = train::view_registry(Chunker::default()).get(mode.as_str())?;
    Ok(train::predict_tracks(&mut model, strategy.as_ref(), store, track_ids, batch_size)?.mapv(sigmoid))
}

/// Nearest-rank percentile of an ascending slice: element `⌈p·n/100⌉ − 1`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = (p * n as f64 / 100.0).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// τ_pos: 95th percentile of scores on ground-truth positive cells;
/// τ_neg: 5th percentile of scores on ground-truth negative cells.
pub fn calibrate_thresholds(scores: &Array2<f64>, labels: &Array2<bool>) -> Result<Thresholds> {
    if scores.dim() != labels.dim() {
        return Err(Error::Shape(format!(
            "scores {:?} vs labels {:?}",
            scores.dim(),
            labels.dim()
        )));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            pos.push(s)
        } else {
            neg.push(s)
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Calibration(format!(
            "need both classes, found {} positive and {} negative cells (use fixed thresholds instead)",
            pos.len(),
            neg.len()
        )));
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let t = Thresholds {
        pos: nearest_rank(&pos, 95.0),
        neg: nearest_rank(&neg, 5.0),
    };
    if t.pos < t.neg {
        return Err(Error::Calibration(format!(
            "calibrated τ_pos {} is below τ_neg {}; the teacher does not separate the classes",
            t.pos, t.neg
        )));
    }
    Ok(t)
}

/// Where pseudo-label thresholds come from.
pub trait ThresholdPolicy: Named + Send + Sync {
    fn thresholds(&self, scores: &Array2<f64>, labels: &Array2<bool>) -> Result<Thresholds>;
}

pub struct Calibrated;
pub struct Fixed(pub Thresholds);

impl Named for Calibrated {
    fn name(&self) -> &str {
        "calibrated"
    }
}
impl ThresholdPolicy for Calibrated {
    fn thresholds(&self, scores: &Array2<f64>, labels: &Array2<bool>) -> Result<Thresholds> {
        calibrate_thresholds(scores, labels)
    }
}

impl Named for Fixed {
    fn name(&self) -> &str {
        "fixed"
    }
}
impl ThresholdPolicy for Fixed {
    fn thresholds(&self, _: &Array2<f64>, _: &Array2<bool>) -> Result<Thresholds> {
        Ok(self.0)
    }
}

pub fn threshold_registry() -> Registry<dyn ThresholdPolicy> {
    let mut reg: Registry<dyn ThresholdPolicy> = Registry::new("threshold policy");
    reg.register(Arc::new(Calibrated));
    reg.register(Arc::new(Fixed(Thresholds::FIXED)));
    reg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub positive: usize,
    pub negative: usize,
    pub abstain: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub track_ids: Vec<String>,
    pub labels: Array2<PseudoLabel>,
    pub thresholds: Thresholds,
    pub teacher_run_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    thresholds: Thresholds,
    teacher_run_id: String,
    num_tags: usize,
    track_ids: Vec<String>,
    counts: LabelCounts,
}

pub fn build_pseudo_labels(
    probs: &Array2<f64>,
    track_ids: Vec<String>,
    thresholds: Thresholds,
    teacher_run_id: &str,
) -> Result<PseudoLabelSet> {
    if !(thresholds.neg < thresholds.pos) {
        return Err(Error::Config(format!(
            "τ_neg ({}) must be below τ_pos ({})",
            thresholds.neg, thresholds.pos
        )));
    }
    if track_ids.len() != probs.nrows() {
        return Err(Error::Shape(format!(
            "{} track ids for {} rows",
            track_ids.len(),
            probs.nrows()
        )));
    }
    Ok(PseudoLabelSet {
        track_ids,
        labels: probs.mapv(|p| thresholds.label(p)),
        thresholds,
        teacher_run_id: teacher_run_id.to_owned(),
    })
}

impl PseudoLabelSet {
    pub fn counts(&self) -> LabelCounts {
        let mut c = LabelCounts {
            positive: 0,
            negative: 0,
            abstain: 0,
        };
        for l in &self.labels {
            match l {
                PseudoLabel::Positive => c.positive += 1,
                PseudoLabel::Negative => c.negative += 1,
                PseudoLabel::Abstain => c.abstain += 1,
            }
        }
        c
    }

    /// Training items for tracks with at least one confident cell; abstain
    /// cells get weight 0 and the rest `weight`.
    pub fn items(&self, weight: f64) -> Vec<TrainItem> {
        self.track_ids
            .iter()
            .zip(self.labels.axis_iter(Axis(0)))
            .filter(|(_, row)| row.iter().any(|&l| l != PseudoLabel::Abstain))
            .map(|(id, row)| TrainItem {
                track_id: id.clone(),
                targets: row.iter().map(|&l| (l == PseudoLabel::Positive) as u8 as f64).collect(),
                weights: row
                    .iter()
                    .map(|&l| if l == PseudoLabel::Abstain { 0.0 } else { weight })
                    .collect(),
            })
            .collect()
    }

    /// `track_id<TAB>tag_index<TAB>{1|0}`; abstain cells are omitted.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, row) in self.track_ids.iter().zip(self.labels.axis_iter(Axis(0))) {
            for (j, l) in row.iter().enumerate() {
                match l {
                    PseudoLabel::Positive => writeln!(out, "{id}\t{j}\t1"),
                    PseudoLabel::Negative => writeln!(out, "{id}\t{j}\t0"),
                    PseudoLabel::Abstain => Ok(()),
                }
                .unwrap();
            }
        }
        out
    }

    pub fn sidecar_path(tsv: &Path) -> PathBuf {
        tsv.with_extension("json")
    }

    /// Writes the TSV at `path` and the JSON sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let side = Sidecar {
            thresholds: self.thresholds,
            teacher_run_id: self.teacher_run_id.clone(),
            num_tags: self.labels.ncols(),
            track_ids: self.track_ids.clone(),
            counts: self.counts(),
        };
        crate::evaluate::io::write_text(path, &self.to_tsv())?;
        crate::evaluate::io::write_text(
            &Self::sidecar_path(path),
            &serde_json::to_string_pretty(&side).expect("sidecar serializes"),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side_path = Self::sidecar_path(path);
        let side_text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let side: Sidecar = serde_json::from_str(&side_text).map_err(|e| Error::Parse {
            path: side_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut labels = Array2::from_elem((side.track_ids.len(), side.num_tags), PseudoLabel::Abstain);
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let err = |m: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: m,
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", f.len())));
            }
            let row = side
                .track_ids
                .iter()
                .position(|t| t == f[0])
                .ok_or_else(|| err(format!("track `{}` missing from sidecar", f[0])))?;
            let col: usize = f[1].parse().map_err(|_| err(format!("bad tag index `{}`", f[1])))?;
            if col >= side.num_tags {
                return Err(err(format!("tag index {col} out of range")));
            }
            labels[[row, col]] = match f[2] {
                "1" => PseudoLabel::Positive,
                "0" => PseudoLabel::Negative,
                o => return Err(err(format!("label must be 0 or 1, found `{o}`"))),
            };
        }
        Ok(Self {
            track_ids: side.track_ids,
            labels,
            thresholds: side.thresholds,
            teacher_run_id: side.teacher_run_id,
        })
    }
}

/// Score train+valid tracks to pick thresholds, then pseudo-label the
/// unlabeled pool.
pub fn pseudo_label_pool(
    teacher: &Checkpoint,
    teacher_run_id: &str,
    manifest: &TrackManifest,
    store: &dyn FeatureStore,
    policy: &dyn ThresholdPolicy,
    batch_size: usize,
) -> Result<PseudoLabelSet> {
    let mode: TrainMode = teacher.meta.mode.parse()?;
    let ids_of = |s: Split| -> Result<Vec<String>> {
        Ok(manifest.split_records(s)?.iter().map(|r| r.track_id.clone()).collect())
    };
    let mut calib_ids = ids_of(Split::Train)?;
    calib_ids.extend(ids_of(Split::Valid)?);
    let refs: Vec<&str> = calib_ids.iter().map(String::as_str).collect();
    let calib_scores = teacher_predict(teacher, mode, store, &refs, batch_size)?;
    let calib_labels = ndarray::concatenate(
        Axis(0),
        &[
            label_matrix(manifest, Split::Train)?.view(),
            label_matrix(manifest, Split::Valid)?.view(),
        ],
    )
    .expect("same tag count");
    let thresholds = policy.thresholds(&calib_scores, &calib_labels)?;

    let pool = ids_of(Split::Unlabeled)?;
    let refs: Vec<&str> = pool.iter().map(String::as_str).collect();
    let probs = teacher_predict(teacher, mode, store, &refs, batch_size)?;
    build_pseudo_labels(&probs, pool, thresholds, teacher_run_id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTrainConfig {
    /// Loss weight of confident pseudo-label cells relative to labeled
    /// cells; 1 is plain concatenation.
    pub mix_ratio: f64,
    pub iterations: usize,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            mix_ratio: 1.0,
            iterations: 1,
        }
    }
}

/// Train a student on labeled tracks plus every pseudo-labeled track with at
/// least one confident cell.
#[allow(clippy::too_many_arguments)]
pub fn train_student(
    student: &mut TaggerModel,
    labeled: Vec<TrainItem>,
    pseudo: &PseudoLabelSet,
    st: &SelfTrainConfig,
    store: &dyn FeatureStore,
    validator: &mut dyn Validator,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if student.config().role != Role::Student {
        return Err(Error::Config("train_student needs a model in the student role".into()));
    }
    if !(st.mix_ratio > 0.0) {
        return Err(Error::Config("selftrain.mix_ratio must be > 0".into()));
    }
    let extra = pseudo.items(st.mix_ratio);
    if extra.is_empty() {
        log::warn!("pseudo-label set has no confident cells; training on labeled tracks only");
    }
    let mut items = labeled;
    items.extend(extra);
    train::train(student, &items, store, validator, cfg, run_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn hundred() -> Array2<f64> {
        Array2::from_shape_fn((100, 1), |(i, _)| (i + 1) as f64 / 100.0)
    }

    #[test]
    fn calibration_examples() {
        let s = hundred();
        let t = calibrate_thresholds(
            &ndarray::concatenate(Axis(0), &[s.view(), s.view()]).unwrap(),
            &Array2::from_shape_fn((200, 1), |(i, _)| i < 100),
        )
        .unwrap();
        assert_eq!((t.pos, t.neg), (0.95, 0.05));

        let scores = array![[0.7], [0.7], [0.7], [0.1]];
        let labels = array![[true], [true], [true], [false]];
        assert_eq!(calibrate_thresholds(&scores, &labels).unwrap().pos, 0.7);

        let e = calibrate_thresholds(&scores, &Array2::from_elem((4, 1), true)).unwrap_err();
        assert!(matches!(e, Error::Calibration(_)));
    }

    #[test]
    fn fixed_thresholds_partition() {
        let t = Thresholds::FIXED;
        assert_eq!(t.label(0.5), PseudoLabel::Positive);
        assert_eq!(t.label(1e-7), PseudoLabel::Negative);
        assert_eq!(t.label(0.05), PseudoLabel::Abstain);
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(t.label(sigmoid(-20.0)), PseudoLabel::Negative);
        let reg = threshold_registry();
        let f = reg
            .get("fixed")
            .unwrap()
            .thresholds(&hundred(), &Array2::from_elem((100, 1), true))
            .unwrap();
        assert_eq!(f, Thresholds::FIXED);
        assert!(reg.get("median").is_err());
    }

    #[test]
    fn inverted_thresholds_are_rejected() {
        let e = build_pseudo_labels(&array![[0.5]], vec!["a".into()], Thresholds { pos: 0.1, neg: 0.2 }, "r");
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn items_mask_abstentions() {
        let set = build_pseudo_labels(
            &array![[0.5, 0.05], [0.05, 0.05]],
            vec!["a".into(), "b".into()],
            Thresholds::FIXED,
            "teacher",
        )
        .unwrap();
        let items = set.items(1.0);
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].targets, vec![1.0, 0.0]);
        assert_eq!(items[0].weights, vec![1.0, 0.0]);

        let logits = array![[0.3, -0.4]];
        let t = Array2::from_shape_vec((1, 2), items[0].targets.clone()).unwrap();
        let w = Array2::from_shape_vec((1, 2), items[0].weights.clone()).unwrap();
        let (_, g) = train::masked_bce_with_logits(&logits, &t, &w);
        assert!(g[[0, 0]] != 0.0 && g[[0, 1]] == 0.0);
    }

    #[test]
    fn files_round_trip() {
        let set = build_pseudo_labels(
            &array![[0.5, 1e-8, 0.01], [0.2, 0.3, 1e-9]],
            vec!["a".into(), "b".into()],
            Thresholds::FIXED,
            "short-hpcp",
        )
        .unwrap();
        assert_eq!(set.to_tsv(), "a\t0\t1\na\t1\t0\nb\t0\t1\nb\t1\t1\nb\t2\t0\n");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pseudo.tsv");
        set.save(&path).unwrap();
        assert_eq!(PseudoLabelSet::load(&path).unwrap(), set);
        let side: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("pseudo.json")).unwrap()).unwrap();
        assert_eq!(side["counts"]["abstain"], 1);
        assert_eq!(side["teacher_run_id"], "short-hpcp");
    }

    proptest! {
        #[test]
        fn partition_and_monotonicity(
            probs in proptest::collection::vec(0.0f64..1.0, 1..60),
            pos in 0.01f64..0.9,
            neg in 1e-9f64..0.01,
            bump in 0.0f64..0.09,
        ) {
            let n = probs.len();
            let p = Array2::from_shape_vec((n, 1), probs).unwrap();
            let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
            let t = Thresholds { pos, neg };
            let c = build_pseudo_labels(&p, ids.clone(), t, "r").unwrap().counts();
            prop_assert_eq!(c.positive + c.negative + c.abstain, n);
            let hi = build_pseudo_labels(&p, ids.clone(), Thresholds { pos: pos + bump, neg }, "r").unwrap().counts();
            prop_assert!(hi.positive <= c.positive);
            let lo = build_pseudo_labels(&p, ids, Thresholds { pos, neg: neg / 2.0 }, "r").unwrap().counts();
            prop_assert!(lo.negative <= c.negative);
        }
    }
}
