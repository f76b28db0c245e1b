//! Long and short input views of a track.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{s, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::registry::{Named, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// The leading ≈185 s of each track.
    Long,
    /// ≈9.25 s aligned chunks.
    Short,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Long => "long",
            TrainMode::Short => "short",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "long" => Ok(TrainMode::Long),
            "short" => Ok(TrainMode::Short),
            o => Err(Error::Config(format!("unknown mode `{o}` (long|short)"))),
        }
    }
}

/// Window lengths in frames. Mel chunk k and HPCP chunk k start at `80k`
/// and `200k`, which cover the same audio span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chunker {
    pub chunk_frames_mel: usize,
    pub chunk_frames_hpcp: usize,
    pub long_frames_mel: usize,
    pub long_frames_hpcp: usize,
}

impl Default for Chunker {
    fn default() -> Self {
        Self {
            chunk_frames_mel: 80,
            chunk_frames_hpcp: 200,
            long_frames_mel: 1600,
            long_frames_hpcp: 4000,
        }
    }
}

impl Chunker {
    pub fn hpcp_offset(&self, chunk: usize) -> usize {
        chunk * self.chunk_frames_hpcp
    }

    pub fn mel_offset(&self, chunk: usize) -> usize {
        chunk * self.chunk_frames_mel
    }
}

/// A fixed-size window of one or both feature matrices, zero-padded, with the
/// count of real (unpadded) frames.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub mel: Array2<f64>,
    pub mel_len: usize,
    pub hpcp: Option<(Array2<f64>, usize)>,
    pub mel_offset: usize,
    pub hpcp_offset: usize,
}

impl View {
    pub fn padded_frames(&self) -> usize {
        self.mel.ncols() - self.mel_len
    }
}

/// Copy `width` frames starting at `offset`, zero-padding past the end.
pub fn window(m: &FeatureMatrix, offset: usize, width: usize) -> (Array2<f64>, usize) {
    let frames = m.frames();
    let mut out = Array2::zeros((m.rows(), width));
    let start = offset.min(frames);
    let len = (frames - start).min(width);
    out.slice_mut(s![.., ..len])
        .assign(&m.data.slice(s![.., start..start + len]).mapv(|v| v as f64));
    (out, len)
}

/// How training examples and inference windows are cut from a track.
pub trait ViewStrategy: Named + Send + Sync {
    fn mode(&self) -> TrainMode;
    /// One training view; `rng` picks the chunk where there is a choice.
    fn training_view(&self, mel: &FeatureMatrix, hpcp: Option<&FeatureMatrix>, rng: &mut dyn rand::RngCore) -> View;
    /// Every window whose logits are averaged at inference.
    fn inference_views(&self, mel: &FeatureMatrix, hpcp: Option<&FeatureMatrix>) -> Vec<View>;
}

pub struct LongView {
    pub chunker: Chunker,
}

impl Named for LongView {
    fn name(&self) -> &str {
        "long"
    }
}

impl LongView {
    fn leading(&self, mel: &FeatureMatrix, hpcp: Option<&FeatureMatrix>) -> View {
        let (m, ml) = window(mel, 0, self.chunker.long_frames_mel);
        View {
            mel: m,
            mel_len: ml,
            hpcp: hpcp.map(|h| window(h, 0, self.chunker.long_frames_hpcp)),
            mel_offset: 0,
            hpcp_offset: 0,
        }
    }
}

impl ViewStrategy for LongView {
    fn mode(&self) -> TrainMode {
        TrainMode::Long
    }

    fn training_view(&self, mel: &FeatureMatrix, hpcp: Option<&FeatureMatrix>, _rng: &mut dyn rand::RngCore) -> View {
        self.leading(mel, hpcp)
    }

    fn inference_views(&self, mel: &FeatureMatrix, hpcp: Option<&FeatureMatrix>) -> Vec<View> {
        vec![self.leading(mel, hpcp)]
    }
}

pub struct ShortView {
    pub chunker: Chunker,
}

impl Named for ShortView {
    fn name(&self) -> &str {
        "short"
    }
}

impl ShortView {
    fn chunk(&self, k: usize, mel: &FeatureMatrix, hpcp: Option<&FeatureMatrix>) -> View {
        let c = &self.chunker;
        let (m, ml) = window(mel, c.mel_offset(k), c.chunk_frames_mel);
        View {
            mel: m,
            mel_len: ml,
            hpcp: hpcp.map(|h| window(h, c.hpcp_offset(k), c.chunk_frames_hpcp)),
            mel_offset: c.mel_offset(k),
            hpcp_offset: c.hpcp_offset(k),
        }
    }
}

impl ViewStrategy for ShortView {
    fn mode(&self) -> TrainMode {
        TrainMode::Short
    }

    fn training_view(&self, mel: &FeatureMatrix, hpcp: Option<&FeatureMatrix>, rng: &mut dyn rand::RngCore) -> View {
        let full = (mel.frames() / self.chunker.chunk_frames_mel).max(1);
        let k = rng.gen_range(0..full);
        self.chunk(k, mel, hpcp)
    }

    fn inference_views(&self, mel: &FeatureMatrix, hpcp: Option<&FeatureMatrix>) -> Vec<View> {
        let n = mel.frames().div_ceil(self.chunker.chunk_frames_mel).max(1);
        (0..n).map(|k| self.chunk(k, mel, hpcp)).collect()
    }
}

pub fn view_registry(chunker: Chunker) -> Registry<dyn ViewStrategy> {
    let mut reg: Registry<dyn ViewStrategy> = Registry::new("training mode");
    reg.register(Arc::new(LongView { chunker }));
    reg.register(Arc::new(ShortView { chunker }));
    reg
}
