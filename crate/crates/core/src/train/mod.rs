//! Supervised training for long and short modes, early stopping on
//! validation ROC-AUC, checkpoint retention and chunk-averaged inference.

pub mod early_stop;
pub mod loss;
pub mod optim;
pub mod store;
pub mod views;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, NoisePolicy};
use crate::error::{Error, Result};
use crate::evaluate::{sigmoid, Metric, RocAuc};
use crate::features::{FeatureKind, FeatureMatrix};
use crate::ingest::{Split, TrackManifest};
use crate::model::{BranchKind, Checkpoint, CheckpointMeta, ModelInput, Module, TaggerModel};
use crate::rng;
pub use early_stop::{EarlyStopper, Verdict};
pub use loss::{bce_with_logits, masked_bce_with_logits};
pub use optim::{Adam, AdamConfig};
pub use store::{CacheStore, FeatureStore, MemoryStore};
pub use views::{view_registry, Chunker, LongView, ShortView, TrainMode, View, ViewStrategy};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub noise: NoisePolicy,
    pub seed: u64,
    /// Random chunks drawn per track per epoch in short mode.
    pub chunks_per_track: usize,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, seed: u64) -> Self {
        Self {
            mode,
            max_epochs: 100,
            patience: 5,
            batch_size: 16,
            adam: AdamConfig::default(),
            noise: NoisePolicy::normal(seed),
            seed,
            chunks_per_track: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.patience < 1 {
            return bad("train.patience must be >= 1");
        }
        if !(self.adam.lr > 0.0) {
            return bad("train.lr must be > 0");
        }
        if self.batch_size < 1 || self.max_epochs < 1 || self.chunks_per_track < 1 {
            return bad("train.batch_size, train.max_epochs and train.chunks_per_track must be >= 1");
        }
        self.noise.validate()
    }
}

/// One training track with per-tag targets and loss weights (0 = abstain).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub track_id: String,
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
}

impl TrainItem {
    pub fn labeled(track_id: &str, row: &[bool]) -> Self {
        Self {
            track_id: track_id.to_owned(),
            targets: row.iter().map(|&b| b as u8 as f64).collect(),
            weights: vec![1.0; row.len()],
        }
    }
}

pub fn labeled_items(manifest: &TrackManifest, split: Split) -> Result<Vec<TrainItem>> {
    Ok(manifest
        .split_records(split)?
        .into_iter()
        .map(|r| TrainItem::labeled(&r.track_id, &manifest.label_row(r)))
        .collect())
}

fn uses_hpcp(model: &TaggerModel) -> bool {
    model.config().branch == BranchKind::Hpcp
}

fn load_pair(
    store: &dyn FeatureStore,
    track_id: &str,
    hpcp: bool,
) -> Result<(Arc<FeatureMatrix>, Option<Arc<FeatureMatrix>>)> {
    let mel = store.get(track_id, FeatureKind::Mel)?;
    let h = if hpcp {
        Some(store.get(track_id, FeatureKind::Hpcp)?)
    } else {
        None
    };
    Ok((mel, h))
}

/// The input view for one training visit of a track.
pub fn make_training_example(
    store: &dyn FeatureStore,
    strategy: &dyn ViewStrategy,
    track_id: &str,
    hpcp: bool,
    rng: &mut dyn rand::RngCore,
) -> Result<View> {
    let (mel, h) = load_pair(store, track_id, hpcp)?;
    Ok(strategy.training_view(&mel, h.as_deref(), rng))
}

type Stacked = (Array3<f64>, Vec<usize>, Option<(Array3<f64>, Vec<usize>)>);

fn stack(views: &[&View]) -> Stacked {
    let mel_views: Vec<_> = views.iter().map(|v| v.mel.view()).collect();
    let mel = ndarray::stack(Axis(0), &mel_views).expect("views share a shape");
    let lens = views.iter().map(|v| v.mel_len).collect();
    let hpcp = views[0].hpcp.is_some().then(|| {
        let hv: Vec<_> = views
            .iter()
            .map(|v| v.hpcp.as_ref().expect("hpcp view").0.view())
            .collect();
        let hl = views.iter().map(|v| v.hpcp.as_ref().unwrap().1).collect();
        (ndarray::stack(Axis(0), &hv).expect("views share a shape"), hl)
    });
    (mel, lens, hpcp)
}

/// Something that turns inference windows into per-window logits.
pub trait ChunkScorer {
    fn score(&mut self, views: &[&View]) -> Result<Array2<f64>>;
}

impl ChunkScorer for TaggerModel {
    fn score(&mut self, views: &[&View]) -> Result<Array2<f64>> {
        let (mel, lens, hpcp) = stack(views);
        self.forward(&ModelInput::new(mel, lens, hpcp), false)
    }
}

fn mean_rows(rows: &Array2<f64>) -> Array1<f64> {
    let mut acc = Array1::zeros(rows.ncols());
    for r in rows.rows() {
        acc += &r;
    }
    acc / rows.nrows() as f64
}

/// Track logits: the mean of the logits of every inference window.
pub fn predict_track(
    scorer: &mut dyn ChunkScorer,
    strategy: &dyn ViewStrategy,
    mel: &FeatureMatrix,
    hpcp: Option<&FeatureMatrix>,
) -> Result<Array1<f64>> {
    let views = strategy.inference_views(mel, hpcp);
    let refs: Vec<&View> = views.iter().collect();
    Ok(mean_rows(&scorer.score(&refs)?))
}

/// Track logits for many tracks, scoring windows `batch_size` at a time.
pub fn predict_tracks(
    model: &mut TaggerModel,
    strategy: &dyn ViewStrategy,
    store: &dyn FeatureStore,
    track_ids: &[&str],
    batch_size: usize,
) -> Result<Array2<f64>> {
    let hpcp = uses_hpcp(model);
    let mut owners = Vec::new();
    let mut views = Vec::new();
    for (i, id) in track_ids.iter().enumerate() {
        let (mel, h) = load_pair(store, id, hpcp)?;
        for v in strategy.inference_views(&mel, h.as_deref()) {
            owners.push(i);
            views.push(v);
        }
    }
    let mut chunk_logits = Array2::zeros((views.len(), model.num_tags()));
    for (b, idx) in (0..views.len())
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .enumerate()
    {
        let refs: Vec<&View> = idx.iter().map(|&i| &views[i]).collect();
        let l = model.score(&refs)?;
        let start = b * batch_size.max(1);
        chunk_logits
            .slice_mut(ndarray::s![start..start + idx.len(), ..])
            .assign(&l);
    }
    let mut out = Array2::zeros((track_ids.len(), model.num_tags()));
    let mut start = 0;
    for i in 0..track_ids.len() {
        let end = start + owners[start..].iter().take_while(|&&o| o == i).count();
        out.row_mut(i)
            .assign(&mean_rows(&chunk_logits.slice(ndarray::s![start..end, ..]).to_owned()));
        start = end;
    }
    Ok(out)
}

/// Per-epoch validation score; larger is better.
pub trait Validator {
    fn validate(&mut self, model: &mut TaggerModel) -> Result<f64>;
}

/// Macro ROC-AUC of chunk-averaged track predictions.
pub struct RocAucValidator<'a> {
    pub store: &'a dyn FeatureStore,
    pub strategy: Arc<dyn ViewStrategy>,
    pub track_ids: Vec<String>,
    pub labels: Array2<bool>,
    pub batch_size: usize,
}

impl<'a> RocAucValidator<'a> {
    pub fn for_split(
        manifest: &TrackManifest,
        split: Split,
        store: &'a dyn FeatureStore,
        strategy: Arc<dyn ViewStrategy>,
        batch_size: usize,
    ) -> Result<Self> {
        let recs = manifest.split_records(split)?;
        Ok(Self {
            store,
            strategy,
            track_ids: recs.iter().map(|r| r.track_id.clone()).collect(),
            labels: crate::ingest::label_matrix(manifest, split)?,
            batch_size,
        })
    }
}

impl Validator for RocAucValidator<'_> {
    fn validate(&mut self, model: &mut TaggerModel) -> Result<f64> {
        let ids: Vec<&str> = self.track_ids.iter().map(String::as_str).collect();
        let logits = predict_tracks(model, self.strategy.as_ref(), self.store, &ids, self.batch_size)?;
        Ok(RocAuc.macro_average(&logits.mapv(sigmoid), &self.labels).value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_roc_auc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_val_roc_auc: f64,
    pub epochs_run: usize,
    pub history: Vec<EpochLog>,
    /// Loss of every optimizer step, in order.
    pub batch_losses: Vec<f64>,
    pub best: Checkpoint,
}

fn append_log(dir: &Path, entry: &EpochLog) -> Result<()> {
    let path = dir.join("log.jsonl");
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{}", serde_json::to_string(entry).expect("log entry serializes")).map_err(|e| Error::io(&path, e))
}

/// Train `model` in place, leaving it holding the best-epoch weights. With a
/// run directory, writes `log.jsonl`, `best.ckpt` and `last.ckpt` there.
pub fn train(
    model: &mut TaggerModel,
    items: &[TrainItem],
    store: &dyn FeatureStore,
    validator: &mut dyn Validator,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if let Some(it) = items
        .iter()
        .find(|it| it.targets.len() != model.num_tags() || it.weights.len() != model.num_tags())
    {
        return Err(Error::Shape(format!(
            "track `{}` has {} targets for a {}-tag model",
            it.track_id,
            it.targets.len(),
            model.num_tags()
        )));
    }
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join("log.jsonl");
        if log.exists() {
            fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
        }
    }
    let hpcp = uses_hpcp(model);
    let strategy: Arc<dyn ViewStrategy> = view_registry(Chunker::default()).get(cfg.mode.as_str())?;
    let visits_per_track = if cfg.mode == TrainMode::Short {
        cfg.chunks_per_track
    } else {
        1
    };
    let t = model.num_tags();
    let mut adam = Adam::new(cfg.adam);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = Vec::new();
    let mut batch_losses = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut global_batch = 0u64;
    let meta = |epoch: usize, s: &EarlyStopper| CheckpointMeta {
        mode: cfg.mode.as_str().into(),
        epoch,
        best_epoch: s.best_epoch,
        best_val_roc_auc: s.best_metric,
    };

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..items.len())
            .flat_map(|i| std::iter::repeat_n(i, visits_per_track))
            .collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[rng::tag::SHUFFLE, epoch as u64]));
        let mut epoch_loss = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, batch) in batches.iter().enumerate() {
            let mut views = Vec::with_capacity(batch.len());
            for (k, &i) in batch.iter().enumerate() {
                let mut r = rng::stream(cfg.seed, &[rng::tag::CHUNK, epoch as u64, b as u64, k as u64]);
                views.push(make_training_example(
                    store,
                    strategy.as_ref(),
                    &items[i].track_id,
                    hpcp,
                    &mut r,
                )?);
            }
            let refs: Vec<&View> = views.iter().collect();
            let (mut mel, lens, mut hp) = stack(&refs);
            match &mut hp {
                Some((h, _)) => augment_batch(&mut [&mut mel, h], &cfg.noise, global_batch),
                None => augment_batch(&mut [&mut mel], &cfg.noise, global_batch),
            }
            global_batch += 1;
            let targets = Array2::from_shape_fn((batch.len(), t), |(r, c)| items[batch[r]].targets[c]);
            let weights = Array2::from_shape_fn((batch.len(), t), |(r, c)| items[batch[r]].weights[c]);

            model.zero_grad();
            let logits = model.forward(&ModelInput::new(mel, lens, hp), true)?;
            let (loss, dlogits) = masked_bce_with_logits(&logits, &targets, &weights);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    lr: cfg.adam.lr,
                });
            }
            model.backward(&dlogits);
            adam.step(model);
            model.clamp_gem();
            batch_losses.push(loss);
            epoch_loss += loss;
        }
        let train_loss = epoch_loss / batches.len() as f64;
        let val = validator.validate(model)?;
        let verdict = stopper.observe(epoch, val);
        let entry = EpochLog {
            epoch,
            train_loss,
            val_roc_auc: val,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {train_loss:.5} val roc_auc {val:.4} ({:.1}s)",
            entry.seconds
        );
        if verdict == Verdict::Improved {
            let ck = Checkpoint::capture(model, meta(epoch, &stopper));
            if let Some(dir) = run_dir {
                ck.save(&dir.join("best.ckpt"))?;
            }
            best = Some(ck);
        }
        if let Some(dir) = run_dir {
            append_log(dir, &entry)?;
            Checkpoint::capture(model, meta(epoch, &stopper)).save(&dir.join("last.ckpt"))?;
        }
        history.push(entry);
        if verdict == Verdict::Stop {
            break;
        }
    }

    // An all-NaN validation history never improves; keep the final weights.
    let best = match best {
        Some(b) => b,
        None => {
            let ck = Checkpoint::capture(model, meta(history.len(), &stopper));
            if let Some(dir) = run_dir {
                ck.save(&dir.join("best.ckpt"))?;
            }
            ck
        }
    };
    best.assign_to(model)?;
    Ok(TrainOutcome {
        best_epoch: stopper.best_epoch,
        best_val_roc_auc: stopper.best_metric,
        epochs_run: history.len(),
        history,
        batch_losses,
        best,
    })
}

#[cfg(test)]
mod tests;
