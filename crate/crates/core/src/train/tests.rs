use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};

use super::*;
use crate::model::tests::tiny_config;
use crate::model::{BranchKind, Role};

struct Planted(Vec<Vec<f64>>);

impl ChunkScorer for Planted {
    fn score(&mut self, views: &[&View]) -> Result<Array2<f64>> {
        assert_eq!(views.len(), self.0.len());
        let t = self.0[0].len();
        Ok(Array2::from_shape_vec((views.len(), t), self.0.concat()).unwrap())
    }
}

fn fm(kind: FeatureKind, rows: usize, frames: usize, seed: u64) -> FeatureMatrix {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    FeatureMatrix {
        kind,
        data: Array2::from_shape_simple_fn((rows, frames), || r.gen_range(-1.0f32..1.0)),
        frame_rate: 1.0,
        track_id: format!("t{seed}"),
    }
}

#[test]
fn chunk_logits_are_averaged() {
    let short = ShortView {
        chunker: Chunker::default(),
    };
    let mel = fm(FeatureKind::Mel, 8, 160, 0);
    let out = predict_track(&mut Planted(vec![vec![1.0], vec![3.0]]), &short, &mel, None).unwrap();
    assert_eq!(out, array![2.0]);

    let one = fm(FeatureKind::Mel, 8, 50, 0);
    let out = predict_track(&mut Planted(vec![vec![0.25, -7.5]]), &short, &one, None).unwrap();
    assert_eq!(out, array![0.25, -7.5]);
}

/// Two small separable tracks per class in a store with 8-row Mel and 4-row HPCP.
fn toy_store(n: usize, frames: usize) -> (MemoryStore, Vec<TrainItem>) {
    let mut store = MemoryStore::default();
    let mut items = Vec::new();
    for i in 0..n {
        let class = i % 2;
        let id = format!("t{i}");
        let mut mel = fm(FeatureKind::Mel, 8, frames, i as u64);
        mel.data.row_mut(class * 4).mapv_inplace(|v| v + 3.0);
        mel.track_id = id.clone();
        let mut h = fm(FeatureKind::Hpcp, 4, frames * 5 / 2, 100 + i as u64);
        h.track_id = id.clone();
        store.insert(mel);
        store.insert(h);
        items.push(TrainItem::labeled(&id, &[class == 0, class == 1]));
    }
    (store, items)
}

struct Scripted(std::vec::IntoIter<f64>);

impl Validator for Scripted {
    fn validate(&mut self, _: &mut TaggerModel) -> Result<f64> {
        Ok(self.0.next().unwrap_or(0.0))
    }
}

fn quick_cfg(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        adam: AdamConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..TrainConfig::new(mode, 5)
    }
}

#[test]
fn early_stopping_keeps_best_epoch_weights() {
    let (store, items) = toy_store(2, 80);
    let mut model = TaggerModel::new(tiny_config(BranchKind::Hpcp, Role::Teacher)).unwrap();
    let seq = vec![0.50, 0.60, 0.61, 0.60, 0.60, 0.60, 0.60, 0.60, 0.99];
    let dir = tempfile::tempdir().unwrap();
    let out = train(
        &mut model,
        &items,
        &store,
        &mut Scripted(seq.into_iter()),
        &quick_cfg(TrainMode::Short),
        Some(dir.path()),
    )
    .unwrap();
    assert_eq!((out.epochs_run, out.best_epoch), (8, 3));
    assert_eq!(out.best.meta.epoch, 3);
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8);
    let first: EpochLog = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first.val_roc_auc, 0.5);

    let best = Checkpoint::load(&dir.path().join("best.ckpt")).unwrap();
    let last = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!((best.meta.epoch, last.meta.epoch), (3, 8));
    let mut restored = best.build_model().unwrap();
    let a: Vec<_> = model.params().into_iter().map(|(n, p)| (n, p.value.clone())).collect();
    let b: Vec<_> = restored
        .params()
        .into_iter()
        .map(|(n, p)| (n, p.value.clone()))
        .collect();
    assert_eq!(a, b);

    let short = ShortView {
        chunker: Chunker::default(),
    };
    let ids = ["t0", "t1"];
    assert_eq!(
        predict_tracks(&mut model, &short, &store, &ids, 4).unwrap(),
        predict_tracks(&mut restored, &short, &store, &ids, 1).unwrap()
    );
}

#[test]
fn rising_metric_runs_every_epoch() {
    let (store, items) = toy_store(2, 80);
    let mut model = TaggerModel::new(tiny_config(BranchKind::Normal, Role::Teacher)).unwrap();
    let seq: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
    let out = train(
        &mut model,
        &items,
        &store,
        &mut Scripted(seq.into_iter()),
        &quick_cfg(TrainMode::Short),
        None,
    )
    .unwrap();
    assert_eq!((out.epochs_run, out.best_epoch), (100, 100));
}

#[test]
fn fixed_seed_reproduces_loss_trajectory() {
    let (store, items) = toy_store(4, 100);
    let run = || {
        let mut model = TaggerModel::new(tiny_config(BranchKind::Hpcp, Role::Student)).unwrap();
        let mut cfg = quick_cfg(TrainMode::Short);
        cfg.max_epochs = 3;
        cfg.noise = NoisePolicy::noisy(9);
        train(
            &mut model,
            &items,
            &store,
            &mut Scripted(vec![0.1, 0.2, 0.3].into_iter()),
            &cfg,
            None,
        )
        .unwrap()
        .batch_losses
    };
    let a = run();
    assert_eq!(a.len(), 6);
    assert_eq!(a, run());
}

#[test]
fn one_small_step_decreases_loss() {
    let (store, items) = toy_store(4, 80);
    let mut model = TaggerModel::new(tiny_config(BranchKind::Hpcp, Role::Teacher)).unwrap();
    let short = ShortView {
        chunker: Chunker::default(),
    };
    let views: Vec<View> = items
        .iter()
        .map(|it| make_training_example(&store, &short, &it.track_id, true, &mut rng::stream(0, &[])).unwrap())
        .collect();
    let refs: Vec<&View> = views.iter().collect();
    let targets = Array2::from_shape_fn((4, 2), |(r, c)| items[r].targets[c]);
    let loss_of = |m: &mut TaggerModel| {
        let (mel, lens, hp) = stack(&refs);
        let logits = m.forward(&ModelInput::new(mel, lens, hp), true).unwrap();
        bce_with_logits(&logits, &targets)
    };
    let (before, g) = loss_of(&mut model);
    model.zero_grad();
    model.backward(&g);
    let mut opt = Adam::new(AdamConfig {
        lr: 1e-4,
        ..Default::default()
    });
    opt.step(&mut model);
    let (after, _) = loss_of(&mut model);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn non_finite_loss_reports_position() {
    let (store, items) = toy_store(2, 80);
    let mut model = TaggerModel::new(tiny_config(BranchKind::Normal, Role::Teacher)).unwrap();
    for (n, p) in model.params_mut() {
        if n == "fc2.bias" {
            p.value.fill(f64::NAN);
        }
    }
    let e = train(
        &mut model,
        &items,
        &store,
        &mut Scripted(vec![].into_iter()),
        &quick_cfg(TrainMode::Long),
        None,
    )
    .unwrap_err();
    assert!(
        matches!(e, Error::NonFiniteLoss { epoch: 1, batch: 0, lr } if lr == 1e-3),
        "{e}"
    );
}

#[test]
fn missing_features_name_the_track() {
    let (store, _) = toy_store(1, 80);
    let long = LongView {
        chunker: Chunker::default(),
    };
    let e = make_training_example(&store, &long, "ghost", false, &mut rng::stream(0, &[])).unwrap_err();
    assert!(e.to_string().contains("ghost"));
}

#[test]
fn student_inference_is_repeatable() {
    let (store, _) = toy_store(2, 60);
    let mut model = TaggerModel::new(tiny_config(BranchKind::Hpcp, Role::Student)).unwrap();
    let long = LongView {
        chunker: Chunker::default(),
    };
    let ids = ["t0", "t1"];
    let a = predict_tracks(&mut model, &long, &store, &ids, 2).unwrap();
    let b = predict_tracks(&mut model, &long, &store, &ids, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(model.stochastic_stats().iter().map(|s| s.0).sum::<u64>(), 0);
}

#[test]
fn config_validation() {
    let mut c = TrainConfig::new(TrainMode::Long, 0);
    assert!(c.validate().is_ok());
    c.patience = 0;
    assert!(c.validate().is_err());
    c.patience = 5;
    c.adam.lr = 0.0;
    assert!(c.validate().is_err());
}
