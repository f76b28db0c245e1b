use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::*;
use rand::{Rng, SeedableRng};

pub(crate) fn tiny_config(branch: BranchKind, role: Role) -> ModelConfig {
    ModelConfig {
        num_tags: 2,
        branch,
        role,
        mel_rows: 8,
        hpcp_rows: 4,
        mel_channels: vec![2, 3, 3, 3],
        hpcp_channels: vec![2, 2, 2],
        rnn_hidden: 3,
        fusion_hidden: 4,
        seed: 7,
        ..ModelConfig::default()
    }
}

fn random_input(cfg: &ModelConfig, b: usize, frames: usize, seed: u64) -> ModelInput {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mel = Array3::from_shape_simple_fn((b, cfg.mel_rows, frames), || r.gen_range(-1.0..1.0));
    let hpcp = Array3::from_shape_simple_fn((b, cfg.hpcp_rows, frames * 2), || r.gen_range(0.0..1.0));
    ModelInput::new(
        mel,
        vec![frames; b],
        (cfg.branch == BranchKind::Hpcp).then(|| (hpcp, vec![frames * 2; b])),
    )
}

#[test]
fn logits_shape_full_size() {
    let cfg = ModelConfig {
        num_tags: 5,
        mel_channels: vec![4, 4, 8, 8],
        hpcp_channels: vec![4, 4, 8],
        rnn_hidden: 8,
        fusion_hidden: 16,
        ..ModelConfig::default()
    };
    let mut m = TaggerModel::new(cfg).unwrap();
    let input = ModelInput::new(
        Array3::zeros((2, 128, 80)),
        vec![80, 80],
        Some((Array3::zeros((2, 12, 200)), vec![200, 200])),
    );
    assert_eq!(m.forward(&input, false).unwrap().dim(), (2, 5));
    assert_eq!(m.forward(&input, true).unwrap().dim(), (2, 5));
}

#[test]
fn shape_errors() {
    let cfg = tiny_config(BranchKind::Hpcp, Role::Teacher);
    let mut m = TaggerModel::new(cfg.clone()).unwrap();
    let bad = ModelInput::new(
        Array3::zeros((1, 7, 8)),
        vec![8],
        Some((Array3::zeros((1, 4, 8)), vec![8])),
    );
    assert!(matches!(m.forward(&bad, false), Err(Error::Shape(_))));
    let missing = ModelInput::new(Array3::zeros((1, 8, 8)), vec![8], None);
    assert!(matches!(m.forward(&missing, false), Err(Error::Shape(_))));
    let empty = ModelInput::new(
        Array3::zeros((1, 8, 0)),
        vec![0],
        Some((Array3::zeros((1, 4, 8)), vec![8])),
    );
    assert!(m.forward(&empty, false).is_err());
}

#[test]
fn eval_is_deterministic_and_history_free() {
    let cfg = tiny_config(BranchKind::Hpcp, Role::Student);
    let mut m = TaggerModel::new(cfg.clone()).unwrap();
    let x = random_input(&cfg, 3, 16, 1);
    let a = m.forward(&x, false).unwrap();
    let b = m.forward(&x, false).unwrap();
    assert_eq!(a, b);
    // Training forwards advance the stochastic-depth stream and BN running
    // statistics. Once parameters and buffers are restored, eval output must
    // not depend on that history.
    let mut trained = m.clone();
    for _ in 0..5 {
        trained.forward(&x, true).unwrap();
    }
    for ((_, dst), (_, src)) in trained.params_mut().into_iter().zip(m.params()) {
        dst.value.assign(&src.value);
    }
    assert_eq!(trained.forward(&x, false).unwrap(), a);
}

#[test]
fn batch_permutation_permutes_logits() {
    let cfg = tiny_config(BranchKind::Hpcp, Role::Teacher);
    let mut m = TaggerModel::new(cfg.clone()).unwrap();
    let x = random_input(&cfg, 4, 12, 3);
    let y = m.forward(&x, false).unwrap();
    let perm = [2usize, 0, 3, 1];
    let mel = x.mel.select(Axis(0), &perm);
    let (h, hl) = x.hpcp.clone().unwrap();
    let px = ModelInput {
        mel,
        mel_lens: perm.iter().map(|&i| x.mel_lens[i]).collect(),
        hpcp: Some((h.select(Axis(0), &perm), perm.iter().map(|&i| hl[i]).collect())),
    };
    let py = m.forward(&px, false).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        for j in 0..2 {
            assert!((py[[k, j]] - y[[i, j]]).abs() < 1e-12);
        }
    }
}

#[test]
fn parameter_counts() {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let lin = Linear::new(512, 256, &mut r);
    assert_eq!(count_parameters(&lin), 131_328);

    struct Stub;
    impl Module for Stub {
        fn params(&self) -> Vec<(String, &Param)> {
            Vec::new()
        }
        fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
            Vec::new()
        }
    }
    assert_eq!(count_parameters(&Stub), 0);

    let t = ModelConfig {
        num_tags: 56,
        ..ModelConfig::default()
    };
    let teacher = TaggerModel::new(t.clone()).unwrap();
    let student = TaggerModel::new(t.as_student()).unwrap();
    assert!(count_parameters(&student) >= count_parameters(&teacher));
}

#[test]
fn stochastic_bypass_rate() {
    let cfg = tiny_config(BranchKind::Normal, Role::Student);
    let mut m = TaggerModel::new(cfg.clone()).unwrap();
    let x = random_input(&cfg, 1, 4, 5);
    for _ in 0..2000 {
        m.forward(&x, true).unwrap();
    }
    let stats = m.stochastic_stats();
    assert_eq!(stats.len(), 3);
    for (passes, bypassed) in stats {
        assert_eq!(passes, 2000);
        let rate = bypassed as f64 / passes as f64;
        assert!((rate - 0.1).abs() < 0.03, "{rate}");
    }
    let teacher = TaggerModel::new(tiny_config(BranchKind::Normal, Role::Teacher)).unwrap();
    assert!(teacher.stochastic_stats().is_empty());
}

/// Weighted-sum loss `Σ w ⊙ logits`; its gradient w.r.t. the logits is `w`.
fn linear_loss(m: &mut TaggerModel, x: &ModelInput, w: &Array2<f64>, train: bool) -> f64 {
    (m.forward(x, train).unwrap() * w).sum()
}

fn grad_check(cfg: ModelConfig, train: bool) {
    let mut m = TaggerModel::new(cfg.clone()).unwrap();
    m.set_stochastic(Stochastic {
        bypass_prob: 0.0,
        dropout: 0.0,
    });
    let mut x = random_input(&cfg, 2, 9, 11);
    x.mel_lens = vec![9, 6];
    if let Some((_, l)) = &mut x.hpcp {
        *l = vec![18, 11];
    }
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let w = Array2::from_shape_simple_fn((2, cfg.num_tags), || r.gen_range(-1.0..1.0));
    m.zero_grad();
    m.forward(&x, train).unwrap();
    m.backward(&w);
    let analytic: Vec<(String, Vec<f64>)> = m
        .params()
        .into_iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, p)| (n, p.grad.iter().copied().collect()))
        .collect();
    let h = 1e-6;
    let mut checked = 0;
    let mut kinks = 0;
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        for k in 0..grads.len() {
            if grads.len() > 6 && r.gen::<f64>() > 0.35 {
                continue;
            }
            let probe = |delta: f64| {
                let mut mm = m.clone();
                {
                    let mut ps: Vec<_> = mm.params_mut().into_iter().filter(|(_, p)| p.trainable).collect();
                    ps[pi].1.value.as_slice_mut().unwrap()[k] += delta;
                }
                linear_loss(&mut mm, &x, &w, train)
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            let a = grads[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel >= 1e-3 {
                // one-sided differences disagree only at a ReLU/clamp kink
                let fp = (probe(h) - probe(0.0)) / h;
                let fm = (probe(0.0) - probe(-h)) / h;
                let kink = (fp - fm).abs() > 1e-3 * fp.abs().max(fm.abs()).max(1e-6);
                assert!(kink, "{name}[{k}]: analytic {a} vs numeric {fd}");
                kinks += 1;
                continue;
            }
            checked += 1;
        }
    }
    assert!(checked > 100, "only {checked} probes");
    assert!(kinks * 20 < checked, "{kinks} kinks in {checked} probes");
}

#[test]
fn gradients_match_finite_differences_eval_graph() {
    grad_check(tiny_config(BranchKind::Hpcp, Role::Student), false);
}

#[test]
fn gradients_match_finite_differences_batch_stats() {
    grad_check(tiny_config(BranchKind::Hpcp, Role::Teacher), true);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = tiny_config(BranchKind::Hpcp, Role::Teacher);
    let mut m = TaggerModel::new(cfg.clone()).unwrap();
    let x = random_input(&cfg, 2, 10, 9);
    m.forward(&x, true).unwrap(); // move running stats
    let meta = CheckpointMeta {
        mode: "short".into(),
        epoch: 3,
        best_epoch: 2,
        best_val_roc_auc: 0.75,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    Checkpoint::capture(&m, meta.clone()).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.meta, meta);
    let mut back = ck.build_model().unwrap();
    assert_eq!(back.forward(&x, false).unwrap(), m.forward(&x, false).unwrap());

    let mut other = TaggerModel::new(tiny_config(BranchKind::Normal, Role::Teacher)).unwrap();
    assert!(ck.assign_to(&mut other).is_err());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(Checkpoint::from_bytes(&bytes, &path).is_err());
}

#[test]
fn gradients_match_finite_differences_normal_branch() {
    grad_check(tiny_config(BranchKind::Normal, Role::Teacher), false);
}
