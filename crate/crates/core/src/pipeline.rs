//! The end-to-end commands: extract, train, pseudolabel, train-student,
//! predict, ensemble and evaluate. Every output lands under the run
//! directory (or the feature cache for `extract`).

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluate::io::{curve_csv, write_report, write_text, PredictionTable};
use crate::evaluate::{self, metric_registry, sigmoid, MetricsReport};
use crate::features::{cache, extractor_registry, FeatureConfig};
use crate::ingest::{label_matrix, load_audio, load_manifest, Split, TrackManifest};
use crate::model::{Checkpoint, Role, TaggerModel};
use crate::selftrain::{self, threshold_registry, PseudoLabelSet};
use crate::train::{self, view_registry, CacheStore, Chunker, RocAucValidator, TrainMode, TrainOutcome};

pub const BEST_CKPT: &str = "best.ckpt";
pub const PSEUDO_FILE: &str = "pseudo.tsv";

pub fn predictions_file(split: Split) -> String {
    format!("predictions-{split}.tsv")
}

pub fn manifest(cfg: &RunConfig) -> Result<TrackManifest> {
    load_manifest(&cfg.manifest, &cfg.vocab)
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            producer: producer.to_owned(),
        })
    }
}

fn load_best(cfg: &RunConfig, run: &str) -> Result<Checkpoint> {
    let path = cfg.run_dir(run).join(BEST_CKPT);
    require(&path, &format!("train --run-id {run}"))?;
    Checkpoint::load(&path)
}

fn start_run(cfg: &RunConfig, run_id: &str) -> Result<PathBuf> {
    let dir = cfg.run_dir(run_id);
    let mut resolved = cfg.clone();
    resolved.run_id = Some(run_id.to_owned());
    write_text(&dir.join("config.txt"), &resolved.to_text())?;
    Ok(dir)
}

/// Size the global worker pool; 0 keeps rayon's default. Only the first
/// call in a process has an effect.
pub fn configure_threads(n: usize) {
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExtractSummary {
    pub written: usize,
    pub skipped: usize,
}

/// Fill the cache with Mel and HPCP features for every track. Files that
/// already decode are left untouched.
pub fn extract(cfg: &RunConfig) -> Result<ExtractSummary> {
    let manifest = manifest(cfg)?;
    let fcfg = FeatureConfig::default();
    let reg = extractor_registry(&fcfg);
    let extractors = [reg.get("mel")?, reg.get("hpcp")?];
    let sample_rate = fcfg.mel.sample_rate;
    let results: Vec<Result<ExtractSummary>> = manifest
        .records
        .par_iter()
        .map(|rec| {
            let mut s = ExtractSummary::default();
            let mut audio: Option<Vec<f32>> = None;
            for ex in &extractors {
                if cache::read_cache(&rec.track_id, ex.kind(), &cfg.cache_dir).is_ok() {
                    s.skipped += 1;
                    continue;
                }
                if audio.is_none() {
                    audio = Some(load_audio(&manifest, rec, sample_rate)?);
                }
                let m = ex.extract(audio.as_deref().unwrap(), &rec.track_id)?;
                cache::write_cache(&m, &cfg.cache_dir)?;
                s.written += 1;
            }
            Ok(s)
        })
        .collect();
    let mut total = ExtractSummary::default();
    for r in results {
        let s = r?;
        total.written += s.written;
        total.skipped += s.skipped;
    }
    Ok(total)
}

pub struct RunResult {
    pub run_id: String,
    pub dir: PathBuf,
    pub outcome: TrainOutcome,
}

/// Supervised training of a teacher (or, with `augment.noisy`, a noised
/// stochastic-depth model without pseudo-labels).
pub fn train(cfg: &RunConfig) -> Result<RunResult> {
    let manifest = manifest(cfg)?;
    let run_id = cfg.run_id();
    let dir = start_run(cfg, &run_id)?;
    let store = CacheStore::new(&cfg.cache_dir);
    let role = if cfg.noisy { Role::Student } else { Role::Teacher };
    let mut model = TaggerModel::new(cfg.model_config(manifest.num_tags(), role))?;
    let tcfg = cfg.train_config();
    let strategy = view_registry(Chunker::default()).get(tcfg.mode.as_str())?;
    let mut validator = RocAucValidator::for_split(&manifest, Split::Valid, &store, strategy, tcfg.batch_size)?;
    let items = train::labeled_items(&manifest, Split::Train)?;
    let outcome = train::train(&mut model, &items, &store, &mut validator, &tcfg, Some(&dir))?;
    Ok(RunResult { run_id, dir, outcome })
}

/// Pseudo-label the unlabeled pool with a teacher run's best checkpoint.
pub fn pseudolabel(
    cfg: &RunConfig,
    teacher_run: &str,
    fixed: bool,
    out: Option<&Path>,
) -> Result<(PathBuf, PseudoLabelSet)> {
    let manifest = manifest(cfg)?;
    let teacher = load_best(cfg, teacher_run)?;
    let store = CacheStore::new(&cfg.cache_dir);
    let policy = threshold_registry().get(if fixed { "fixed" } else { &cfg.thresholds })?;
    let set = selftrain::pseudo_label_pool(
        &teacher,
        teacher_run,
        &manifest,
        &store,
        policy.as_ref(),
        cfg.batch_size,
    )?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.run_dir(teacher_run).join(PSEUDO_FILE));
    set.save(&path)?;
    Ok((path, set))
}

/// Train a noised student on labeled plus pseudo-labeled tracks, repeating
/// teacher→student `selftrain.iterations` times.
pub fn train_student(cfg: &RunConfig, teacher_run: &str, pseudo_path: Option<&Path>) -> Result<RunResult> {
    let manifest = manifest(cfg)?;
    let teacher = load_best(cfg, teacher_run)?;
    let pseudo_path = pseudo_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.run_dir(teacher_run).join(PSEUDO_FILE));
    require(&pseudo_path, &format!("pseudolabel --teacher-run {teacher_run}"))?;
    let mut pseudo = PseudoLabelSet::load(&pseudo_path)?;
    let mode: TrainMode = teacher.meta.mode.parse()?;

    let mut scfg = cfg.clone();
    scfg.mode = mode;
    scfg.branch = teacher.model.branch;
    scfg.noisy = true;
    let run_id = cfg.run_id.clone().unwrap_or_else(|| format!("{teacher_run}-noisy"));
    let dir = start_run(&scfg, &run_id)?;
    let st = scfg.selftrain_config();
    if st.iterations < 1 {
        return Err(Error::Config("selftrain.iterations must be >= 1".into()));
    }
    let store = CacheStore::new(&cfg.cache_dir);
    let tcfg = scfg.train_config();
    let strategy = view_registry(Chunker::default()).get(mode.as_str())?;
    let policy = threshold_registry().get(&cfg.thresholds)?;
    let mut outcome = None;
    for generation in 1..=st.iterations {
        if generation > 1 {
            let prev = Checkpoint::load(&dir.join(BEST_CKPT))?;
            pseudo = selftrain::pseudo_label_pool(&prev, &run_id, &manifest, &store, policy.as_ref(), tcfg.batch_size)?;
            pseudo.save(&dir.join(format!("pseudo-gen{generation}.tsv")))?;
        }
        let mut mcfg = teacher.model.as_student();
        mcfg.seed = cfg.seed;
        let mut student = TaggerModel::new(mcfg)?;
        let mut validator =
            RocAucValidator::for_split(&manifest, Split::Valid, &store, strategy.clone(), tcfg.batch_size)?;
        let labeled = train::labeled_items(&manifest, Split::Train)?;
        outcome = Some(selftrain::train_student(
            &mut student,
            labeled,
            &pseudo,
            &st,
            &store,
            &mut validator,
            &tcfg,
            Some(&dir),
        )?);
    }
    Ok(RunResult {
        run_id,
        dir,
        outcome: outcome.expect("at least one generation"),
    })
}

/// Track-level logits of a run's best checkpoint on one split.
pub fn predict(cfg: &RunConfig, run: &str, split: Split) -> Result<(PathBuf, PredictionTable)> {
    let manifest = manifest(cfg)?;
    let ck = load_best(cfg, run)?;
    let mode: TrainMode = ck.meta.mode.parse()?;
    let mut model = ck.build_model()?;
    let store = CacheStore::new(&cfg.cache_dir);
    let strategy = view_registry(Chunker::default()).get(mode.as_str())?;
    let ids: Vec<String> = manifest
        .split_records(split)?
        .iter()
        .map(|r| r.track_id.clone())
        .collect();
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let logits = train::predict_tracks(&mut model, strategy.as_ref(), &store, &refs, cfg.batch_size)?;
    let table = PredictionTable::new(ids, manifest.vocabulary.tags().to_vec(), logits)?;
    let path = cfg.run_dir(run).join(predictions_file(split));
    table.save(&path)?;
    Ok((path, table))
}

fn predictions_of(cfg: &RunConfig, run: &str, split: Split) -> Result<PredictionTable> {
    let path = cfg.run_dir(run).join(predictions_file(split));
    if path.exists() {
        PredictionTable::load(&path)
    } else {
        Ok(predict(cfg, run, split)?.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub alpha: f64,
    pub short_run_id: String,
    pub long_run_id: String,
    pub objective: Option<String>,
}

pub enum AlphaChoice {
    Fixed(f64),
    Sweep,
}

/// `α · short + (1 − α) · long` on `split` (and on the validation split),
/// with α fixed or swept on validation predictions.
pub fn ensemble(
    cfg: &RunConfig,
    short_run: &str,
    long_run: &str,
    alpha: AlphaChoice,
    split: Split,
) -> Result<(PathBuf, EnsembleSpec)> {
    let manifest = manifest(cfg)?;
    let run_id = cfg.run_id.clone().unwrap_or_else(|| "ensemble".into());
    let dir = start_run(cfg, &run_id)?;
    let combine = |s: Split, a: f64| -> Result<PredictionTable> {
        let ids: Vec<String> = manifest.split_records(s)?.iter().map(|r| r.track_id.clone()).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let ls = predictions_of(cfg, short_run, s)?.select(&refs)?;
        let ll = predictions_of(cfg, long_run, s)?.select(&refs)?;
        PredictionTable::new(
            ids,
            manifest.vocabulary.tags().to_vec(),
            evaluate::ensemble(&ls, &ll, a)?,
        )
    };
    let (a, objective) = match alpha {
        AlphaChoice::Fixed(a) => (a, None),
        AlphaChoice::Sweep => {
            let ids: Vec<String> = manifest
                .split_records(Split::Valid)?
                .iter()
                .map(|r| r.track_id.clone())
                .collect();
            let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            let ls = predictions_of(cfg, short_run, Split::Valid)?.select(&refs)?;
            let ll = predictions_of(cfg, long_run, Split::Valid)?.select(&refs)?;
            let labels = label_matrix(&manifest, Split::Valid)?;
            let metric = metric_registry(cfg.decision_threshold).get(&cfg.objective)?;
            let (a, curve) =
                evaluate::sweep_alpha(&ls, &ll, &labels, &evaluate::default_alpha_grid(), metric.as_ref())?;
            write_text(&dir.join("alpha_curve.csv"), &curve_csv(&curve, &cfg.objective))?;
            (a, Some(cfg.objective.clone()))
        }
    };
    let spec = EnsembleSpec {
        alpha: a,
        short_run_id: short_run.to_owned(),
        long_run_id: long_run.to_owned(),
        objective,
    };
    write_text(
        &dir.join("ensemble.json"),
        &serde_json::to_string_pretty(&spec).expect("spec serializes"),
    )?;
    if split != Split::Valid {
        combine(Split::Valid, a)?.save(&dir.join(predictions_file(Split::Valid)))?;
    }
    let out = dir.join(predictions_file(split));
    combine(split, a)?.save(&out)?;
    Ok((out, spec))
}

/// Metrics for a prediction file against the manifest labels of `split`.
/// With `tune`, per-tag thresholds come from the validation predictions
/// that sit next to it.
pub fn evaluate_predictions(
    cfg: &RunConfig,
    predictions: &Path,
    split: Split,
    tune: bool,
) -> Result<(PathBuf, MetricsReport)> {
    let manifest = manifest(cfg)?;
    require(predictions, "predict")?;
    let dir = predictions.parent().map(Path::to_path_buf).unwrap_or_default();
    let probs_of = |table: &PredictionTable, s: Split| -> Result<_> {
        let ids: Vec<String> = manifest.split_records(s)?.iter().map(|r| r.track_id.clone()).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        Ok(table.select(&refs)?.mapv(sigmoid))
    };
    let table = PredictionTable::load(predictions)?;
    let probs = probs_of(&table, split)?;
    let labels = label_matrix(&manifest, split)?;
    let mut rcfg = cfg.report_config();
    if tune {
        let vpath = dir.join(predictions_file(Split::Valid));
        require(&vpath, &format!("predict --split {}", Split::Valid))?;
        let vprobs = probs_of(&PredictionTable::load(&vpath)?, Split::Valid)?;
        rcfg.tuned_thresholds = Some(evaluate::tune_thresholds(
            &vprobs,
            &label_matrix(&manifest, Split::Valid)?,
            cfg.decision_threshold,
        )?);
    }
    let report = evaluate::report(&probs, &labels, manifest.vocabulary.tags(), &rcfg)?;
    let stem = format!("report-{split}");
    write_report(&report, &dir, &stem)?;
    Ok((dir.join(format!("{stem}.json")), report))
}
