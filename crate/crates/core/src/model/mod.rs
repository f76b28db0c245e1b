//! The two-branch convolutional-recurrent tagger.
//!
//! Each branch is a stack of residual [`ConvBlock`]s with GeM downsampling,
//! a bidirectional GRU over the remaining time axis, and masked temporal GeM
//! pooling into a latent vector. The "hpcp" variant concatenates the Mel and
//! HPCP latents; the "normal" variant uses the Mel latent alone. Two linear
//! layers map the latent to per-tag logits.
//!
//! Backpropagation is hand-written per layer; everything runs in `f64`.

pub mod block;
pub mod checkpoint;
pub mod gem;
pub mod gru;
pub mod layers;
pub mod param;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use block::{ConvBlock, Stochastic};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use gem::gem_pool;
pub use param::{count_parameters, Module, Param};

use gem::TemporalGem;
use gru::BiGru;
use layers::{relu_backward, relu_inplace, Linear};
use param::{prefixed, prefixed_mut};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    /// Mel branch only.
    Normal,
    /// Mel + HPCP fusion.
    Hpcp,
}

impl BranchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BranchKind::Normal => "normal",
            BranchKind::Hpcp => "hpcp",
        }
    }
}

impl fmt::Display for BranchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BranchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(BranchKind::Normal),
            "hpcp" => Ok(BranchKind::Hpcp),
            o => Err(Error::Config(format!("unknown branch `{o}` (normal|hpcp)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    /// The deepest Mel blocks become stochastic-depth blocks.
    Student,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_tags: usize,
    pub branch: BranchKind,
    pub role: Role,
    pub mel_rows: usize,
    pub hpcp_rows: usize,
    pub mel_channels: Vec<usize>,
    pub hpcp_channels: Vec<usize>,
    /// Per direction; the branch latent is twice this.
    pub rnn_hidden: usize,
    pub fusion_hidden: usize,
    pub gem_p_init: f64,
    pub gem_eps: f64,
    pub stochastic_blocks: usize,
    pub bypass_prob: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_tags: 1,
            branch: BranchKind::Hpcp,
            role: Role::Teacher,
            mel_rows: 128,
            hpcp_rows: 12,
            mel_channels: vec![32, 64, 128, 256],
            hpcp_channels: vec![32, 64, 128],
            rnn_hidden: 128,
            fusion_hidden: 256,
            gem_p_init: 3.0,
            gem_eps: gem::DEFAULT_EPS,
            stochastic_blocks: 3,
            bypass_prob: 0.1,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tags == 0 {
            return Err(Error::Config("model needs at least one tag".into()));
        }
        if self.mel_channels.is_empty() || (self.branch == BranchKind::Hpcp && self.hpcp_channels.is_empty()) {
            return Err(Error::Config("each branch needs at least one conv block".into()));
        }
        if self.role == Role::Student && self.stochastic_blocks > self.mel_channels.len() {
            return Err(Error::Config(format!(
                "{} stochastic blocks requested but the Mel branch has {}",
                self.stochastic_blocks,
                self.mel_channels.len()
            )));
        }
        if !(0.0..1.0).contains(&self.bypass_prob) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("bypass_prob and dropout must lie in [0, 1)".into()));
        }
        if self.gem_p_init < 1.0 {
            return Err(Error::Config("gem_p_init must be >= 1".into()));
        }
        Ok(())
    }

    /// Same architecture, switched to the student role.
    pub fn as_student(&self) -> Self {
        Self {
            role: Role::Student,
            ..self.clone()
        }
    }
}

/// One batch of network inputs: `[batch, 1, rows, frames]` per branch plus
/// each sample's valid (unpadded) frame count.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub mel: Array4<f64>,
    pub mel_lens: Vec<usize>,
    pub hpcp: Option<(Array4<f64>, Vec<usize>)>,
}

impl ModelInput {
    pub fn new(mel: Array3<f64>, mel_lens: Vec<usize>, hpcp: Option<(Array3<f64>, Vec<usize>)>) -> Self {
        Self {
            mel: mel.insert_axis(Axis(1)),
            mel_lens,
            hpcp: hpcp.map(|(h, l)| (h.insert_axis(Axis(1)), l)),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.mel.dim().0
    }
}

#[derive(Debug, Clone)]
struct Branch {
    blocks: Vec<ConvBlock>,
    rnn: BiGru,
    pool: TemporalGem,
    rows: usize,
    cache_shape: Option<(usize, usize, usize, usize)>,
}

fn pooled_len(len: usize, blocks: usize) -> usize {
    (0..blocks).fold(len, |l, _| l.div_ceil(2))
}

impl Branch {
    fn new(rows: usize, channels: &[usize], stochastic_tail: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut cin = 1;
        let n = channels.len();
        let blocks = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let stoch = (i >= n - stochastic_tail).then_some(Stochastic {
                    bypass_prob: cfg.bypass_prob,
                    dropout: cfg.dropout,
                });
                let b = ConvBlock::new(cin, c, cfg.gem_p_init, cfg.gem_eps, stoch, rng);
                cin = c;
                b
            })
            .collect();
        let out_rows = pooled_len(rows, n);
        Self {
            blocks,
            rnn: BiGru::new(cin * out_rows, cfg.rnn_hidden, rng),
            pool: TemporalGem::new(cfg.gem_p_init, cfg.gem_eps),
            rows,
            cache_shape: None,
        }
    }

    fn forward(&mut self, x: &Array4<f64>, lens: &[usize], train: bool, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        let (b, c, r, f) = x.dim();
        if c != 1 || r != self.rows || f == 0 {
            return Err(Error::Shape(format!(
                "branch expects [batch, 1, {}, frames>0], got [{b}, {c}, {r}, {f}]",
                self.rows
            )));
        }
        if lens.len() != b {
            return Err(Error::Shape(format!("{} lengths for a batch of {b}", lens.len())));
        }
        let mut h = x.clone();
        for blk in &mut self.blocks {
            h = blk.forward(&h, train, rng);
        }
        let (_, ch, rr, ff) = h.dim();
        self.cache_shape = Some((b, ch, rr, ff));
        // [B, C, R, F] -> [B, F, C·R]
        let seq = h
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b, ff, ch * rr))
            .expect("contiguous");
        let nblocks = self.blocks.len();
        let seq_lens: Vec<usize> = lens.iter().map(|&l| pooled_len(l.clamp(1, f), nblocks)).collect();
        let enc = self.rnn.forward(&seq, &seq_lens);
        Ok(self.pool.forward(&enc, &seq_lens))
    }

    fn backward(&mut self, dlatent: &Array2<f64>) {
        let (b, ch, rr, ff) = self.cache_shape.take().expect("branch backward before forward");
        let denc = self.pool.backward(dlatent);
        let dseq = self.rnn.backward(&denc);
        let mut d = dseq
            .into_shape_with_order((b, ff, ch, rr))
            .expect("contiguous")
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_owned();
        for blk in self.blocks.iter_mut().rev() {
            d = blk.backward(&d);
        }
    }
}

impl Module for Branch {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(prefixed(&format!("block{i}"), b.params()));
        }
        v.extend(prefixed("rnn", self.rnn.params()));
        v.extend(prefixed("tgem", self.pool.params()));
        v
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("block{i}"), b.params_mut()));
        }
        v.extend(prefixed_mut("rnn", self.rnn.params_mut()));
        v.extend(prefixed_mut("tgem", self.pool.params_mut()));
        v
    }
}

/// The complete tagger.
#[derive(Debug, Clone)]
pub struct TaggerModel {
    cfg: ModelConfig,
    mel: Branch,
    hpcp: Option<Branch>,
    fc1: Linear,
    fc2: Linear,
    rng: ChaCha8Rng,
    cache: Option<FusionCache>,
}

#[derive(Debug, Clone)]
struct FusionCache {
    hidden: Array2<f64>,
    mel_dim: usize,
}

impl TaggerModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = rng::stream(cfg.seed, &[rng::tag::INIT]);
        let tail = if cfg.role == Role::Student {
            cfg.stochastic_blocks
        } else {
            0
        };
        let mel = Branch::new(cfg.mel_rows, &cfg.mel_channels, tail, &cfg, &mut init);
        let hpcp = (cfg.branch == BranchKind::Hpcp)
            .then(|| Branch::new(cfg.hpcp_rows, &cfg.hpcp_channels, 0, &cfg, &mut init));
        let latent = 2 * cfg.rnn_hidden * if hpcp.is_some() { 2 } else { 1 };
        let fc1 = Linear::new(latent, cfg.fusion_hidden, &mut init);
        let fc2 = Linear::new(cfg.fusion_hidden, cfg.num_tags, &mut init);
        Ok(Self {
            rng: rng::stream(cfg.seed, &[rng::tag::STOCHASTIC]),
            cfg,
            mel,
            hpcp,
            fc1,
            fc2,
            cache: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn num_tags(&self) -> usize {
        self.cfg.num_tags
    }

    /// Logits `[batch, num_tags]`. Training mode uses batch statistics and,
    /// for students, stochastic depth and dropout.
    pub fn forward(&mut self, input: &ModelInput, train: bool) -> Result<Array2<f64>> {
        let b = input.batch_size();
        let mut latent = self.mel.forward(&input.mel, &input.mel_lens, train, &mut self.rng)?;
        let mel_dim = latent.ncols();
        match (&mut self.hpcp, &input.hpcp) {
            (Some(br), Some((h, lens))) => {
                if h.dim().0 != b {
                    return Err(Error::Shape("mel and hpcp batch sizes differ".into()));
                }
                let hl = br.forward(h, lens, train, &mut self.rng)?;
                latent = ndarray::concatenate(Axis(1), &[latent.view(), hl.view()]).expect("same batch");
            }
            (Some(_), None) => return Err(Error::Shape("hpcp model requires an hpcp input".into())),
            (None, _) => {}
        }
        let mut hidden = self.fc1.forward(&latent);
        relu_inplace(&mut hidden);
        let logits = self.fc2.forward(&hidden);
        self.cache = Some(FusionCache { hidden, mel_dim });
        Ok(logits)
    }

    /// Accumulate parameter gradients for `dlogits = ∂loss/∂logits`.
    pub fn backward(&mut self, dlogits: &Array2<f64>) {
        let cache = self.cache.take().expect("model backward before forward");
        let dh = self.fc2.backward(dlogits);
        let dh = relu_backward(&cache.hidden, &dh);
        let dlat = self.fc1.backward(&dh);
        let dmel = dlat.slice(ndarray::s![.., ..cache.mel_dim]).to_owned();
        if let Some(br) = &mut self.hpcp {
            let dh = dlat.slice(ndarray::s![.., cache.mel_dim..]).to_owned();
            br.backward(&dh);
        }
        self.mel.backward(&dmel);
    }

    /// `(train passes, bypassed passes)` of each stochastic Mel block.
    pub fn stochastic_stats(&self) -> Vec<(u64, u64)> {
        self.mel
            .blocks
            .iter()
            .filter(|b| b.stochastic.is_some())
            .map(|b| (b.train_passes, b.bypassed_passes))
            .collect()
    }

    /// Set every stochastic block's bypass/dropout probabilities.
    pub fn set_stochastic(&mut self, s: Stochastic) {
        for b in self.mel.blocks.iter_mut().filter(|b| b.stochastic.is_some()) {
            b.stochastic = Some(s);
        }
    }

    /// Clamp GeM exponents to `p >= 1` after an optimizer step.
    pub fn clamp_gem(&mut self) {
        for (name, p) in self.params_mut() {
            if name.ends_with("gem.p") {
                let v = p.value.as_slice_mut().unwrap();
                if !(v[0] >= 1.0) {
                    v[0] = 1.0;
                }
            }
        }
    }

    /// GeM exponents by parameter name.
    pub fn gem_exponents(&self) -> Vec<(String, f64)> {
        self.params()
            .into_iter()
            .filter(|(n, _)| n.ends_with("gem.p"))
            .map(|(n, p)| (n, p.v()[0]))
            .collect()
    }
}

impl Module for TaggerModel {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut v = prefixed("mel", self.mel.params());
        if let Some(h) = &self.hpcp {
            v.extend(prefixed("hpcp", h.params()));
        }
        v.extend(prefixed("fc1", self.fc1.params()));
        v.extend(prefixed("fc2", self.fc2.params()));
        v
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = prefixed_mut("mel", self.mel.params_mut());
        if let Some(h) = &mut self.hpcp {
            v.extend(prefixed_mut("hpcp", h.params_mut()));
        }
        v.extend(prefixed_mut("fc1", self.fc1.params_mut()));
        v.extend(prefixed_mut("fc2", self.fc2.params_mut()));
        v
    }
}

#[cfg(test)]
pub(crate) mod tests;
