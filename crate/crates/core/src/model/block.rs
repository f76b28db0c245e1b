//! Residual convolution blocks, plain and stochastic-depth.

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::gem::Gem2d;
use super::layers::{relu_backward, relu_inplace, BatchNorm2d, Conv2d};
use super::param::{prefixed, prefixed_mut, Module, Param};

/// Bypass and dropout settings of a stochastic block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stochastic {
    pub bypass_prob: f64,
    pub dropout: f64,
}

/// conv3×3 → BN → ReLU → conv3×3 → BN, plus a shortcut (1×1 conv when the
/// channel count changes), summed, ReLU, then 2×2 GeM downsampling.
///
/// A stochastic block, in training mode, is skipped entirely with probability
/// `bypass_prob` (only the shortcut and downsampling run) and applies dropout
/// after the post-sum ReLU. In eval mode it always runs, without dropout.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    proj: Option<Conv2d>,
    pool: Gem2d,
    pub stochastic: Option<Stochastic>,
    /// Training-mode passes and how many of them were bypassed.
    pub train_passes: u64,
    pub bypassed_passes: u64,
    cache: Option<BlockCache>,
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
enum BlockCache {
    Bypassed,
    Full {
        a1: Array4<f64>,
        u: Array4<f64>,
        drop_mask: Option<Array4<f64>>,
    },
}

impl ConvBlock {
    pub fn new(
        cin: usize,
        cout: usize,
        p_init: f64,
        eps: f64,
        stochastic: Option<Stochastic>,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv1: Conv2d::new(cin, cout, 3, rng),
            bn1: BatchNorm2d::new(cout),
            conv2: Conv2d::new(cout, cout, 3, rng),
            bn2: BatchNorm2d::new(cout),
            proj: (cin != cout).then(|| Conv2d::new(cin, cout, 1, rng)),
            pool: Gem2d::new(p_init, eps),
            stochastic,
            train_passes: 0,
            bypassed_passes: 0,
            cache: None,
        }
    }

    fn shortcut(&mut self, x: &Array4<f64>) -> Array4<f64> {
        match &mut self.proj {
            Some(p) => p.forward(x),
            None => x.clone(),
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool, rng: &mut ChaCha8Rng) -> Array4<f64> {
        let stoch = if train { self.stochastic } else { None };
        if let Some(s) = stoch {
            self.train_passes += 1;
            if rng.gen::<f64>() < s.bypass_prob {
                self.bypassed_passes += 1;
                let sc = self.shortcut(x);
                self.cache = Some(BlockCache::Bypassed);
                return self.pool.forward(&sc);
            }
        }
        let mut a1 = self.bn1.forward(&self.conv1.forward(x), train);
        relu_inplace(&mut a1);
        let mut u = self.bn2.forward(&self.conv2.forward(&a1), train);
        u += &self.shortcut(x);
        relu_inplace(&mut u);
        let mut drop_mask = None;
        let pooled_in =
            match stoch {
                Some(s) if s.dropout > 0.0 => {
                    let keep = 1.0 - s.dropout;
                    let mask = Array4::from_shape_simple_fn(u.raw_dim(), || {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    let d = &u * &mask;
                    drop_mask = Some(mask);
                    d
                }
                _ => u.clone(),
            };
        self.cache = Some(BlockCache::Full { a1, u, drop_mask });
        self.pool.forward(&pooled_in)
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let d_in = self.pool.backward(dy);
        match self.cache.take().expect("block backward before forward") {
            BlockCache::Bypassed => match &mut self.proj {
                Some(p) => p.backward(&d_in),
                None => d_in,
            },
            BlockCache::Full { a1, u, drop_mask } => {
                let du = match drop_mask {
                    Some(m) => &d_in * &m,
                    None => d_in,
                };
                let du = relu_backward(&u, &du);
                let mut dx = match &mut self.proj {
                    Some(p) => p.backward(&du),
                    None => du.clone(),
                };
                let d = self.bn2.backward(&du);
                let d = self.conv2.backward(&d);
                let d = relu_backward(&a1, &d);
                let d = self.bn1.backward(&d);
                dx += &self.conv1.backward(&d);
                dx
            }
        }
    }

    pub fn gem(&self) -> &Gem2d {
        &self.pool
    }
}

impl Module for ConvBlock {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut v = prefixed("conv1", self.conv1.params());
        v.extend(prefixed("bn1", self.bn1.params()));
        v.extend(prefixed("conv2", self.conv2.params()));
        v.extend(prefixed("bn2", self.bn2.params()));
        if let Some(p) = &self.proj {
            v.extend(prefixed("proj", p.params()));
        }
        v.extend(prefixed("gem", self.pool.params()));
        v
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = prefixed_mut("conv1", self.conv1.params_mut());
        v.extend(prefixed_mut("bn1", self.bn1.params_mut()));
        v.extend(prefixed_mut("conv2", self.conv2.params_mut()));
        v.extend(prefixed_mut("bn2", self.bn2.params_mut()));
        if let Some(p) = &mut self.proj {
            v.extend(prefixed_mut("proj", p.params_mut()));
        }
        v.extend(prefixed_mut("gem", self.pool.params_mut()));
        v
    }
}
