//! Training-time noise: SpecAugment-style time/frequency masks with a
//! per-batch length budget, and additive Gaussian noise.
//!
//! Evaluation code never calls into this module.

use ndarray::{s, Array3, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePolicy {
    pub mask_lo: usize,
    pub mask_hi: usize,
    pub gaussian_weight: f64,
    pub seed: u64,
    pub time_masks: usize,
    pub freq_masks: usize,
}

impl NoisePolicy {
    /// Teacher-regime augmentation: mask budgets in [20, 60], no Gaussian noise.
    pub fn normal(seed: u64) -> Self {
        Self {
            mask_lo: 20,
            mask_hi: 60,
            gaussian_weight: 0.0,
            seed,
            time_masks: 1,
            freq_masks: 1,
        }
    }

    /// Student-regime augmentation: budgets in [30, 90], Gaussian weight 0.01.
    pub fn noisy(seed: u64) -> Self {
        Self {
            mask_lo: 30,
            mask_hi: 90,
            gaussian_weight: 0.01,
            ..Self::normal(seed)
        }
    }

    /// No augmentation at all.
    pub fn none(seed: u64) -> Self {
        Self {
            mask_lo: 0,
            mask_hi: 0,
            gaussian_weight: 0.0,
            seed,
            time_masks: 0,
            freq_masks: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask_lo > self.mask_hi {
            return Err(Error::Config(format!(
                "augment.mask_lo ({}) exceeds augment.mask_hi ({})",
                self.mask_lo, self.mask_hi
            )));
        }
        if !(self.gaussian_weight >= 0.0) {
            return Err(Error::Config("augment.gaussian_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Maximum mask length shared by the time and frequency masks of one batch.
pub fn sample_mask_budget(policy: &NoisePolicy, batch_index: u64) -> usize {
    let mut r = rng::stream(policy.seed, &[rng::tag::MASK_BUDGET, batch_index]);
    r.gen_range(policy.mask_lo..=policy.mask_hi)
}

fn mask_one(mut m: ArrayViewMut2<f64>, l_max: usize, policy: &NoisePolicy, r: &mut impl Rng) {
    let (rows, frames) = m.dim();
    if rows == 0 || frames == 0 {
        return;
    }
    let fill = m.mean().unwrap_or(0.0);
    for _ in 0..policy.time_masks {
        let len = r.gen_range(0..=l_max.min(frames));
        let start = r.gen_range(0..=frames - len);
        m.slice_mut(s![.., start..start + len]).fill(fill);
    }
    for _ in 0..policy.freq_masks {
        let len = r.gen_range(0..=l_max.min(rows));
        let start = r.gen_range(0..=rows - len);
        m.slice_mut(s![start..start + len, ..]).fill(fill);
    }
}

/// Mask every sample of a `[batch, rows, frames]` array in place.
///
/// Masked cells take the sample's mean value.
pub fn apply_masks(batch: &mut Array3<f64>, l_max: usize, policy: &NoisePolicy, r: &mut impl Rng) {
    if l_max == 0 {
        return;
    }
    for sample in batch.axis_iter_mut(Axis(0)) {
        mask_one(sample, l_max, policy, r);
    }
}

/// `batch += weight · ε`, ε ~ N(0, 1) per cell.
pub fn add_gaussian(batch: &mut Array3<f64>, weight: f64, r: &mut impl Rng) {
    if weight == 0.0 {
        return;
    }
    for v in batch.iter_mut() {
        let e: f64 = r.sample(StandardNormal);
        *v += weight * e;
    }
}

/// Full training-time noise for one batch: masks, then Gaussian noise.
pub fn augment_batch(views: &mut [&mut Array3<f64>], policy: &NoisePolicy, batch_index: u64) {
    let l_max = sample_mask_budget(policy, batch_index);
    let mut mr = rng::stream(policy.seed, &[rng::tag::MASKS, batch_index]);
    let mut gr = rng::stream(policy.seed, &[rng::tag::GAUSSIAN, batch_index]);
    for v in views.iter_mut() {
        apply_masks(v, l_max, policy, &mut mr);
    }
    for v in views.iter_mut() {
        add_gaussian(v, policy.gaussian_weight, &mut gr);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ramp(b: usize, r: usize, f: usize) -> Array3<f64> {
        Array3::from_shape_fn((b, r, f), |(i, j, k)| (i * 1000 + j * 37 + k) as f64 * 0.01)
    }

    #[test]
    fn degenerate_budget() {
        let mut p = NoisePolicy::normal(3);
        p.mask_hi = 20;
        for i in 0..50 {
            assert_eq!(sample_mask_budget(&p, i), 20);
        }
    }

    #[test]
    fn budget_mean_and_determinism() {
        let p = NoisePolicy::normal(11);
        let n = 10_000;
        let mean = (0..n).map(|i| sample_mask_budget(&p, i) as f64).sum::<f64>() / n as f64;
        assert!((mean - 40.0).abs() < 1.0, "{mean}");
        assert_eq!(sample_mask_budget(&p, 77), sample_mask_budget(&p, 77));
        let q = NoisePolicy::noisy(11);
        assert!((0..1000)
            .map(|i| sample_mask_budget(&q, i))
            .all(|l| (30..=90).contains(&l)));
    }

    #[test]
    fn zero_budget_is_identity() {
        let mut b = ramp(2, 8, 10);
        let orig = b.clone();
        apply_masks(&mut b, 0, &NoisePolicy::normal(0), &mut rng::stream(0, &[]));
        assert_eq!(b, orig);
    }

    #[test]
    fn full_budget_alters_single_run() {
        let p = NoisePolicy {
            freq_masks: 0,
            ..NoisePolicy::normal(0)
        };
        for seed in 0..20 {
            let mut b = ramp(1, 4, 30);
            let orig = b.clone();
            apply_masks(&mut b, 30, &p, &mut rng::stream(seed, &[]));
            let changed: Vec<bool> = (0..30)
                .map(|k| (0..4).any(|j| b[[0, j, k]] != orig[[0, j, k]]))
                .collect();
            let runs = changed.windows(2).filter(|w| !w[0] && w[1]).count() + changed[0] as usize;
            assert!(runs <= 1);
        }
    }

    #[test]
    fn masks_are_deterministic() {
        let p = NoisePolicy::normal(5);
        let mut a = ramp(3, 16, 40);
        let mut b = a.clone();
        apply_masks(&mut a, 20, &p, &mut rng::stream(9, &[1]));
        apply_masks(&mut b, 20, &p, &mut rng::stream(9, &[1]));
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_identity_and_std() {
        let mut z = Array3::zeros((1, 1000, 1000));
        add_gaussian(&mut z, 0.0, &mut rng::stream(1, &[]));
        assert!(z.iter().all(|&v| v == 0.0));
        add_gaussian(&mut z, 0.01, &mut rng::stream(1, &[]));
        let n = z.len() as f64;
        let mean = z.sum() / n;
        let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.01).abs() < 0.0005, "{std}");
        let mut z2 = Array3::zeros((1, 1000, 1000));
        add_gaussian(&mut z2, 0.01, &mut rng::stream(1, &[]));
        assert_eq!(z, z2);
    }

    #[test]
    fn policy_validation() {
        assert!(NoisePolicy {
            mask_lo: 5,
            mask_hi: 4,
            ..NoisePolicy::normal(0)
        }
        .validate()
        .is_err());
        assert!(NoisePolicy::noisy(0).validate().is_ok());
    }

    proptest! {
        #[test]
        fn masked_cell_count_is_bounded(seed in 0u64..1000, l_max in 0usize..50) {
            let p = NoisePolicy::normal(seed);
            let (rows, frames) = (12, 40);
            let mut b = ramp(1, rows, frames);
            let orig = b.clone();
            let mut r1 = rng::stream(seed, &[]);
            apply_masks(&mut b, l_max, &p, &mut r1);
            // replay the draws to learn the actual lengths
            let mut r2 = rng::stream(seed, &[]);
            let (lt, lf) = if l_max == 0 { (0, 0) } else {
                let lt = r2.gen_range(0..=l_max.min(frames));
                let _ = r2.gen_range(0..=frames - lt);
                let lf = r2.gen_range(0..=l_max.min(rows));
                (lt, lf)
            };
            let changed = b.iter().zip(orig.iter()).filter(|(a, b)| a != b).count();
            prop_assert!(changed <= lt * rows + lf * frames);
        }
    }
}
