//! Feature extraction: pooled log-Mel spectrograms and HPCP matrices.

pub mod cache;
pub mod hpcp;
pub mod mel;
pub mod stft;

use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::registry::{Named, Registry};

pub use cache::{read_cache, write_cache};
pub use hpcp::{hpcp, HpcpConfig};
pub use mel::{mel_spectrogram, MelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    Mel,
    Hpcp,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Mel => "mel",
            FeatureKind::Hpcp => "hpcp",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            FeatureKind::Mel => 0,
            FeatureKind::Hpcp => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FeatureKind::Mel),
            1 => Some(FeatureKind::Hpcp),
            _ => None,
        }
    }

    pub fn rows(self) -> usize {
        match self {
            FeatureKind::Mel => 128,
            FeatureKind::Hpcp => 12,
        }
    }

    /// Frame rate of the cached representation (pooled for Mel).
    pub fn default_frame_rate(self) -> f64 {
        let f = FeatureConfig::default();
        match self {
            FeatureKind::Mel => f.mel.sample_rate as f64 / (f.mel.hop * f.pool_factor) as f64,
            FeatureKind::Hpcp => f.hpcp.sample_rate as f64 / f.hpcp.hop as f64,
        }
    }
}

/// A `rows × frames` feature array for one track.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub kind: FeatureKind,
    pub data: Array2<f32>,
    pub frame_rate: f64,
    pub track_id: String,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn frames(&self) -> usize {
        self.data.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub mel: MelConfig,
    pub hpcp: HpcpConfig,
    pub pool_factor: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            mel: MelConfig::default(),
            hpcp: HpcpConfig::default(),
            pool_factor: 10,
        }
    }
}

/// Average `factor` consecutive frames; trailing remainder frames are dropped.
pub fn temporal_avg_pool(m: &FeatureMatrix, factor: usize) -> Result<FeatureMatrix> {
    if factor == 0 {
        return Err(Error::Config("pooling factor must be >= 1".into()));
    }
    let (rows, frames) = m.data.dim();
    if frames < factor {
        return Err(Error::TooShort(format!("{frames} frames cannot be pooled by {factor}")));
    }
    let out_frames = frames / factor;
    let mut data = Array2::zeros((rows, out_frames));
    for r in 0..rows {
        let src = m.data.row(r);
        for j in 0..out_frames {
            let s: f64 = (0..factor).map(|k| src[j * factor + k] as f64).sum();
            data[[r, j]] = (s / factor as f64) as f32;
        }
    }
    Ok(FeatureMatrix {
        kind: m.kind,
        data,
        frame_rate: m.frame_rate / factor as f64,
        track_id: m.track_id.clone(),
    })
}

/// A named way to turn mono audio into a cached feature matrix.
pub trait FeatureExtractor: Named + Send + Sync {
    fn kind(&self) -> FeatureKind;
    fn extract(&self, samples: &[f32], track_id: &str) -> Result<FeatureMatrix>;
}

/// Log-Mel followed by temporal average pooling.
pub struct PooledMelExtractor {
    pub mel: MelConfig,
    pub pool_factor: usize,
}

impl Named for PooledMelExtractor {
    fn name(&self) -> &str {
        "mel"
    }
}

impl FeatureExtractor for PooledMelExtractor {
    fn kind(&self) -> FeatureKind {
        FeatureKind::Mel
    }

    fn extract(&self, samples: &[f32], track_id: &str) -> Result<FeatureMatrix> {
        temporal_avg_pool(&mel_spectrogram(samples, &self.mel, track_id)?, self.pool_factor)
    }
}

pub struct HpcpExtractor {
    pub cfg: HpcpConfig,
}

impl Named for HpcpExtractor {
    fn name(&self) -> &str {
        "hpcp"
    }
}

impl FeatureExtractor for HpcpExtractor {
    fn kind(&self) -> FeatureKind {
        FeatureKind::Hpcp
    }

    fn extract(&self, samples: &[f32], track_id: &str) -> Result<FeatureMatrix> {
        hpcp(samples, &self.cfg, track_id)
    }
}

pub fn extractor_registry(cfg: &FeatureConfig) -> Registry<dyn FeatureExtractor> {
    let mut reg: Registry<dyn FeatureExtractor> = Registry::new("feature extractor");
    reg.register(Arc::new(PooledMelExtractor {
        mel: cfg.mel.clone(),
        pool_factor: cfg.pool_factor,
    }));
    reg.register(Arc::new(HpcpExtractor { cfg: cfg.hpcp.clone() }));
    reg
}
